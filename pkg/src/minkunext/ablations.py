"""Design-progress architecture variants.

The final architecture was reached through a documented sequence of
modifications starting from a classic sparse U-Net with ResNet blocks.
Each named step below is the full configuration *after* applying that
step's modification on top of its predecessor state, so every variant is
buildable and comparable. ``PARAM_DIRECTION`` records, for each step, the
config it should be compared against and the expected direction of the
trainable-parameter-count change ("down", "up" or "equal").
"""

from __future__ import annotations

from dataclasses import replace

from .model import ArchConfig

# Starting point: ResNet-block U-Net, cardinality (2,3,4,6,2,2,2,2),
# 4 skip connections, decoder channels (128, 128, 96, 96), k=5/s=1 stem.
START = ArchConfig(
    encoder_channels=(32, 64, 128, 256),
    decoder_channels=(128, 128, 96, 96),
    num_skips=4,
    cardinalities=(2, 3, 4, 6, 2, 2, 2, 2),
    block_variant="resnet",
    block_activation="relu",
    block_norm_main="batch",
    block_kernel_sizes=(3, 3, 3),
)

_g11 = replace(START, cardinalities=(2,) * 8)
_g12 = replace(_g11, cardinalities=(1,) * 8)
_g21 = replace(_g12, decoder_channels=(128, 128, 128, 128))
_g22 = replace(_g12, decoder_channels=(192, 192, 128, 128))
_g31 = replace(_g22, num_skips=2, decoder_channels=(192, 192), cardinalities=(1,) * 6)
_g32 = replace(_g22, num_skips=3, decoder_channels=(192, 192, 128), cardinalities=(1,) * 7)
_g4 = replace(_g32, stem_kernel=4, stem_stride=4)
_r1 = replace(_g32, block_variant="bottleneck")
_r2 = replace(_g32, block_variant="inverted_bottleneck", block_kernel_sizes=(3, 3, 3))
_r31 = replace(_g32, block_activation="gelu")
_r32 = replace(_r2, block_activation="gelu")
_r4 = replace(_r32, block_norm_main="layer")
_r51 = replace(_r4, block_kernel_sizes=(5, 3, 3))
_r52 = replace(_r4, block_kernel_sizes=(7, 3, 3))
_r53 = replace(_r4, block_kernel_sizes=(1, 3, 3))

STEPS: dict[str, ArchConfig] = {
    "G1.1": _g11,
    "G1.2": _g12,
    "G2.1": _g21,
    "G2.2": _g22,
    "G3.1": _g31,
    "G3.2": _g32,
    "G4": _g4,
    "R1": _r1,
    "R2": _r2,
    "R3.1": _r31,
    "R3.2": _r32,
    "R4": _r4,
    "R5.1": _r51,
    "R5.2": _r52,
    "R5.3": _r53,
}

# step -> (comparison step or "START", expected parameter-count change)
PARAM_DIRECTION: dict[str, tuple[str, str]] = {
    "G1.1": ("START", "down"),
    "G1.2": ("G1.1", "down"),
    "G2.1": ("G1.2", "up"),
    "G2.2": ("G1.2", "up"),
    "G3.1": ("G2.2", "down"),
    "G3.2": ("G2.2", "down"),
    "G4": ("G3.2", "down"),
    "R1": ("G3.2", "down"),
    "R2": ("G3.2", "up"),
    "R3.1": ("G3.2", "equal"),
    "R3.2": ("R2", "equal"),
    "R4": ("R3.2", "equal"),
    "R5.1": ("R4", "up"),
    "R5.2": ("R4", "up"),
    "R5.3": ("R4", "down"),
}


def ablation_config(step: str) -> ArchConfig:
    """Architecture after the named design step; "START" gives the base."""
    if step == "START":
        return START
    if step not in STEPS:
        raise KeyError(f"unknown ablation step {step!r}; choose from {list(STEPS)}")
    return STEPS[step]
