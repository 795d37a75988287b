#!/usr/bin/env python3
"""Walkthrough: assembling the network and probing its invariances."""

import numpy as np

from minkunext import ArchConfig, build_model
from minkunext.ablations import PARAM_DIRECTION, STEPS, ablation_config

print("== default architecture ==")
cfg = ArchConfig()
model = build_model(cfg, seed=0)
print(f"encoder channels : {cfg.encoder_channels}")
print(f"decoder channels : {cfg.decoder_channels} ({cfg.num_skips} skip fusions)")
print(f"residual blocks  : {len(model.blocks())} "
      f"(hidden width 4x output, e.g. {model.blocks()[0].hidden} for "
      f"{model.blocks()[0].c_out} channels)")
print(f"parameters       : {model.parameter_count():,}")

print("\n== descriptors ==")
small = build_model(cfg.scaled(4), seed=0, quantization_scale=0.05)
rng = np.random.default_rng(1)
cloud = rng.uniform(-1, 1, size=(200, 3))
desc = small.embed([cloud])
print(f"desk-scale model ({small.parameter_count():,} params) descriptor: {desc.shape}")

shuffled = small.embed([cloud[rng.permutation(len(cloud))]])
print(f"point-permutation invariant (bitwise): {np.array_equal(desc, shuffled)}")

other = rng.uniform(-1, 1, size=(200, 3))
batched = small.embed([cloud, other])
print(f"batch-composition invariant (bitwise): {np.array_equal(desc[0], batched[0])}")

print("\n== design-progress variants ==")
counts = {"START": build_model(ablation_config("START"), seed=0).parameter_count()}
for step in STEPS:
    counts[step] = build_model(ablation_config(step), seed=0).parameter_count()
for step, (base, direction) in PARAM_DIRECTION.items():
    arrow = {"down": "<", "up": ">", "equal": "="}[direction]
    ok = {"<": counts[step] < counts[base],
          ">": counts[step] > counts[base],
          "=": counts[step] == counts[base]}[arrow]
    print(f"{step:<5} {counts[step]:>11,} params  {arrow} {base:<5} "
          f"({counts[base]:,})  {'ok' if ok else 'UNEXPECTED'}")
