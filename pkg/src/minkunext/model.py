"""MinkUNeXt network assembly.

A declarative ``ArchConfig`` drives the whole structure: stem, four-stage
encoder, skip-fused decoder, residual blocks (ResNet / bottleneck /
inverted-bottleneck variants), per-voxel FC expansion and GeM head. Every
design-progress variant of the architecture is reachable through the config
(see :mod:`minkunext.ablations`).

A forward pass has two phases: coordinate planning (quantization, stride
arithmetic, kernel maps — pure combinatorics, cached on the model) and the
numeric flow over feature matrices, optionally recorded on a tape for
reverse-mode differentiation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .autodiff import Tape, Var
from .voxels import (
    CoordinateMap,
    SparseTensor,
    batch_row_spans,
    build_coordinate_map,
    build_kernel_map,
    quantize_batch,
    stride_coords,
)

BLOCK_VARIANTS = ("resnet", "bottleneck", "inverted_bottleneck")
ACTIVATIONS = ("relu", "gelu")
NORMS = ("batch", "layer")


@dataclass(frozen=True)
class ArchConfig:
    """Structural description of the network, spanning every ablation axis."""

    encoder_channels: tuple[int, ...] = (32, 64, 128, 256)
    decoder_channels: tuple[int, ...] = (192, 192, 128)
    stem_kernel: int = 5
    stem_stride: int = 1
    num_skips: int = 3
    cardinalities: tuple[int, ...] = (1, 1, 1, 1, 1, 1, 1)
    block_variant: str = "inverted_bottleneck"
    block_activation: str = "gelu"
    block_norm_main: str = "layer"
    block_kernel_sizes: tuple[int, int, int] = (1, 3, 3)
    fc_dim: int = 512
    gem_p_init: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))
        object.__setattr__(self, "cardinalities", tuple(self.cardinalities))
        object.__setattr__(self, "block_kernel_sizes", tuple(self.block_kernel_sizes))
        if len(self.encoder_channels) != 4:
            raise ValueError("encoder_channels must have 4 entries")
        if self.num_skips not in (2, 3, 4):
            raise ValueError("num_skips must be 2, 3 or 4")
        if len(self.decoder_channels) != self.num_skips:
            raise ValueError("decoder_channels must have num_skips entries")
        if len(self.cardinalities) != 4 + self.num_skips:
            raise ValueError("cardinalities must have one entry per encoder/decoder stage")
        if any(c < 1 for c in self.cardinalities):
            raise ValueError("cardinalities must all be >= 1")
        if any(c < 1 for c in self.encoder_channels + self.decoder_channels):
            raise ValueError("channel counts must be positive")
        if self.block_variant not in BLOCK_VARIANTS:
            raise ValueError(f"unknown block variant {self.block_variant!r}")
        if self.block_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.block_activation!r}")
        if self.block_norm_main not in NORMS:
            raise ValueError(f"unknown norm {self.block_norm_main!r}")
        if self.stem_kernel < 1 or self.stem_stride < 1 or self.fc_dim < 1:
            raise ValueError("stem and fc settings must be positive")
        if self.gem_p_init < 1:
            raise ValueError("gem_p_init must be >= 1")

    def scaled(self, divisor: int) -> "ArchConfig":
        """Desk-scale variant: every channel count divided by ``divisor``."""
        return replace(
            self,
            encoder_channels=tuple(max(1, c // divisor) for c in self.encoder_channels),
            decoder_channels=tuple(max(1, c // divisor) for c in self.decoder_channels),
            fc_dim=max(1, self.fc_dim // divisor),
        )

    def to_dict(self) -> dict:
        return {
            "encoder_channels": list(self.encoder_channels),
            "decoder_channels": list(self.decoder_channels),
            "stem_kernel": self.stem_kernel,
            "stem_stride": self.stem_stride,
            "num_skips": self.num_skips,
            "cardinalities": list(self.cardinalities),
            "block_variant": self.block_variant,
            "block_activation": self.block_activation,
            "block_norm_main": self.block_norm_main,
            "block_kernel_sizes": list(self.block_kernel_sizes),
            "fc_dim": self.fc_dim,
            "gem_p_init": self.gem_p_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)

    def to_file(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_file(cls, path) -> "ArchConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _record(tape, out, inputs, vjp):
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


def _add(tape, a: Var, b: Var) -> Var:
    out = Var(a.data + b.data)
    return _record(tape, out, (a, b), lambda g: (g, g))


class SparseConvLayer:
    """Sparse (transpose) convolution layer; bias-free (a norm always follows)."""

    def __init__(self, rng, name, c_in, c_out, kernel_size, stride=1,
                 transposed=False, dtype=np.float32):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.kernel_size = kernel_size
        self.stride = stride
        self.transposed = transposed
        k3 = kernel_size**3
        self.weight = Var(
            _kaiming_uniform(rng, (k3, c_in, c_out), fan_in=k3 * c_in, dtype=dtype),
            name=f"{name}.weight",
        )

    def parameters(self):
        return [self.weight]

    def forward(self, tape, x: Var, kmap, num_out: int) -> Var:
        fwd = ops.sparse_conv_transpose if self.transposed else ops.sparse_conv
        out_data, ctx = fwd(x.data, self.weight.data, None, kmap, num_out)
        out = Var(out_data)

        def vjp(g):
            gx, gw, _ = ops.sparse_conv_backward(ctx, g)
            return gx, gw

        return _record(tape, out, (x, self.weight), vjp)


class BatchNormLayer:
    def __init__(self, name, channels, dtype=np.float32,
                 momentum=ops.BN_MOMENTUM, eps=ops.BN_EPS):
        self.name = name
        self.gamma = Var(np.ones(channels, dtype=dtype), name=f"{name}.gamma")
        self.beta = Var(np.zeros(channels, dtype=dtype), name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {
            f"{self.name}.running_mean": self.running_mean,
            f"{self.name}.running_var": self.running_var,
        }

    def forward(self, tape, x: Var, training: bool) -> Var:
        out_data, ctx = ops.batch_norm(
            x.data, self.gamma.data, self.beta.data,
            self.running_mean, self.running_var, training,
            momentum=self.momentum, eps=self.eps,
        )
        out = Var(out_data)
        return _record(tape, out, (x, self.gamma, self.beta),
                       lambda g: ops.batch_norm_backward(ctx, g))


class LayerNormLayer:
    def __init__(self, name, channels, dtype=np.float32, eps=ops.LN_EPS):
        self.name = name
        self.gamma = Var(np.ones(channels, dtype=dtype), name=f"{name}.gamma")
        self.beta = Var(np.zeros(channels, dtype=dtype), name=f"{name}.beta")
        self.eps = eps

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {}

    def forward(self, tape, x: Var, training: bool = False) -> Var:
        out_data, ctx = ops.layer_norm(x.data, self.gamma.data, self.beta.data, eps=self.eps)
        out = Var(out_data)
        return _record(tape, out, (x, self.gamma, self.beta),
                       lambda g: ops.layer_norm_backward(ctx, g))


def _activation(tape, x: Var, kind: str) -> Var:
    if kind == "relu":
        out_data, ctx = ops.relu(x.data)
        backward = ops.relu_backward
    elif kind == "gelu":
        out_data, ctx = ops.gelu(x.data)
        backward = ops.gelu_backward
    else:
        raise ValueError(f"unknown activation {kind!r}")
    out = Var(out_data)
    return _record(tape, out, (x,), lambda g: backward(ctx, g))


def _concat(tape, a: Var, b: Var) -> Var:
    out_data, ctx = ops.concat_features(a.data, b.data)
    out = Var(out_data)
    return _record(tape, out, (a, b), lambda g: ops.concat_features_backward(ctx, g))


class LinearLayer:
    def __init__(self, rng, name, c_in, c_out, dtype=np.float32):
        self.name = name
        self.weight = Var(
            _kaiming_uniform(rng, (c_in, c_out), fan_in=c_in, dtype=dtype),
            name=f"{name}.weight",
        )
        self.bias = Var(np.zeros(c_out, dtype=dtype), name=f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, tape, x: Var) -> Var:
        out_data, ctx = ops.linear(x.data, self.weight.data, self.bias.data)
        out = Var(out_data)
        return _record(tape, out, (x, self.weight, self.bias),
                       lambda g: ops.linear_backward(ctx, g))


class GeMPoolLayer:
    """Pools per-voxel descriptors to one row per batch element."""

    def __init__(self, name, p_init=3.0, dtype=np.float32, eps=ops.GEM_EPS):
        self.name = name
        self.p = Var(np.array([p_init], dtype=dtype), name=f"{name}.p")
        self.eps = eps

    def parameters(self):
        return [self.p]

    def forward(self, tape, x: Var, spans) -> Var:
        p = float(self.p.data[0])
        rows = []
        ctxs = []
        for start, stop in spans:
            pooled, ctx = ops.gem_pool(x.data[start:stop], p, eps=self.eps)
            rows.append(pooled)
            ctxs.append(ctx)
        out = Var(np.stack(rows, axis=0))

        def vjp(g):
            gx = np.zeros_like(x.data)
            gp = 0.0
            for (start, stop), ctx, grow in zip(spans, ctxs, g):
                gfeat, gpe = ops.gem_pool_backward(ctx, grow)
                gx[start:stop] = gfeat
                gp += gpe
            return gx, np.array([gp], dtype=x.data.dtype)

        return _record(tape, out, (x, self.p), vjp)


class MinkNeXtBlock:
    """Residual block; the variant selects the main-stream topology.

    inverted_bottleneck (the MinkNeXt block): widen to the output width,
    expand 4x, reduce; norms in the main stream, single activation after the
    expansion, no post-sum activation. resnet / bottleneck are the classic
    shapes with a post-sum activation. The residual path is identity when the
    channel counts match, otherwise a 1x1x1 convolution with BatchNorm.
    """

    def __init__(self, rng, name, c_in, c_out, variant, activation, norm_main,
                 kernel_sizes, dtype=np.float32):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.variant = variant
        self.activation = activation

        def conv(tag, ci, co, k):
            return SparseConvLayer(rng, f"{name}.{tag}", ci, co, k, dtype=dtype)

        def norm(tag, c):
            if norm_main == "layer":
                return LayerNormLayer(f"{name}.{tag}", c, dtype=dtype)
            return BatchNormLayer(f"{name}.{tag}", c, dtype=dtype)

        if variant == "inverted_bottleneck":
            k1, k2, k3 = kernel_sizes
            self.hidden = 4 * c_out
            self.conv1 = conv("conv1", c_in, c_out, k1)
            self.norm1 = norm("norm1", c_out)
            self.conv2 = conv("conv2", c_out, self.hidden, k2)
            self.conv3 = conv("conv3", self.hidden, c_out, k3)
            self.norm2 = norm("norm2", c_out)
            self.post_sum_activation = False
        elif variant == "resnet":
            self.hidden = c_out
            self.conv1 = conv("conv1", c_in, c_out, 3)
            self.norm1 = norm("norm1", c_out)
            self.conv2 = conv("conv2", c_out, c_out, 3)
            self.norm2 = norm("norm2", c_out)
            self.conv3 = None
            self.post_sum_activation = True
        elif variant == "bottleneck":
            self.hidden = max(c_out // 4, 1)
            self.conv1 = conv("conv1", c_in, self.hidden, 1)
            self.norm1 = norm("norm1", self.hidden)
            self.conv2 = conv("conv2", self.hidden, self.hidden, 3)
            self.norm_mid = norm("norm_mid", self.hidden)
            self.conv3 = conv("conv3", self.hidden, c_out, 1)
            self.norm2 = norm("norm2", c_out)
            self.post_sum_activation = True
        else:
            raise ValueError(f"unknown block variant {variant!r}")

        if c_in != c_out:
            self.res_conv = conv("res_conv", c_in, c_out, 1)
            self.res_norm = BatchNormLayer(f"{name}.res_norm", c_out, dtype=dtype)
        else:
            self.res_conv = None
            self.res_norm = None

    def kernel_sizes_needed(self) -> set[int]:
        sizes = {self.conv1.kernel_size, self.conv2.kernel_size}
        if self.conv3 is not None:
            sizes.add(self.conv3.kernel_size)
        if self.res_conv is not None:
            sizes.add(1)
        return sizes

    def sublayers(self):
        layers = [self.conv1, self.norm1, self.conv2]
        if self.variant == "bottleneck":
            layers.append(self.norm_mid)
        if self.conv3 is not None:
            layers.append(self.conv3)
        layers.append(self.norm2)
        if self.res_conv is not None:
            layers.extend([self.res_conv, self.res_norm])
        return layers

    def parameters(self):
        out = []
        for layer in self.sublayers():
            out.extend(layer.parameters())
        return out

    def buffers(self):
        out = {}
        for layer in self.sublayers():
            if hasattr(layer, "buffers"):
                out.update(layer.buffers())
        return out

    def forward(self, tape, x: Var, kmaps: dict[int, object], n: int, training: bool) -> Var:
        act = self.activation
        if self.variant == "inverted_bottleneck":
            y = self.conv1.forward(tape, x, kmaps[self.conv1.kernel_size], n)
            y = self.norm1.forward(tape, y, training)
            y = self.conv2.forward(tape, y, kmaps[self.conv2.kernel_size], n)
            y = _activation(tape, y, act)
            y = self.conv3.forward(tape, y, kmaps[self.conv3.kernel_size], n)
            y = self.norm2.forward(tape, y, training)
        elif self.variant == "resnet":
            y = self.conv1.forward(tape, x, kmaps[3], n)
            y = self.norm1.forward(tape, y, training)
            y = _activation(tape, y, act)
            y = self.conv2.forward(tape, y, kmaps[3], n)
            y = self.norm2.forward(tape, y, training)
        else:  # bottleneck
            y = self.conv1.forward(tape, x, kmaps[1], n)
            y = self.norm1.forward(tape, y, training)
            y = _activation(tape, y, act)
            y = self.conv2.forward(tape, y, kmaps[3], n)
            y = self.norm_mid.forward(tape, y, training)
            y = _activation(tape, y, act)
            y = self.conv3.forward(tape, y, kmaps[1], n)
            y = self.norm2.forward(tape, y, training)

        if self.res_conv is not None:
            r = self.res_conv.forward(tape, x, kmaps[1], n)
            r = self.res_norm.forward(tape, r, training)
        else:
            r = x
        out = _add(tape, y, r)
        if self.post_sum_activation:
            out = _activation(tape, out, act)
        return out


@dataclass
class ForwardPlan:
    """Coordinate bookkeeping for one forward pass."""

    maps: dict[int, CoordinateMap] = field(default_factory=dict)  # stride -> map
    kmaps: dict = field(default_factory=dict)
    spans: list = field(default_factory=list)
    batch_size: int = 0
    final_stride: int = 0


class Model:
    """The assembled network plus the coordinate cache of the last forward."""

    def __init__(self, cfg: ArchConfig, seed: int = 0, quantization_scale: float = 0.01,
                 dtype=np.float32):
        self.cfg = cfg
        self.seed = seed
        self.quantization_scale = quantization_scale
        self.dtype = dtype
        self.last_plan: ForwardPlan | None = None
        rng = np.random.default_rng(seed)

        enc = cfg.encoder_channels
        stem_out = enc[0]
        self.stem_conv = SparseConvLayer(
            rng, "stem.conv", 1, stem_out, cfg.stem_kernel, stride=cfg.stem_stride, dtype=dtype
        )
        self.stem_norm = BatchNormLayer("stem.norm", stem_out, dtype=dtype)

        def make_blocks(stage_name, c_in, c_out, count):
            blocks = []
            for b in range(count):
                ci = c_in if b == 0 else c_out
                blocks.append(MinkNeXtBlock(
                    rng, f"{stage_name}.block{b + 1}", ci, c_out,
                    cfg.block_variant, cfg.block_activation, cfg.block_norm_main,
                    cfg.block_kernel_sizes, dtype=dtype,
                ))
            return blocks

        self.encoder = []
        prev = stem_out
        for i in range(4):
            name = f"enc{i + 1}"
            stage = {
                "name": name,
                "down": SparseConvLayer(rng, f"{name}.down", prev, prev, 2, stride=2, dtype=dtype),
                "norm": BatchNormLayer(f"{name}.norm", prev, dtype=dtype),
                "blocks": make_blocks(name, prev, enc[i], cfg.cardinalities[i]),
                "out_channels": enc[i],
            }
            self.encoder.append(stage)
            prev = enc[i]

        # skip sources: decoder stage j fuses with the encoder output at the
        # matching stride (enc stage 4-j; the stem output for j = 4)
        skip_channels = [enc[2], enc[1], enc[0], stem_out]
        self.decoder = []
        for j in range(cfg.num_skips):
            name = f"dec{j + 1}"
            dc = cfg.decoder_channels[j]
            cat = dc + skip_channels[j]
            stage = {
                "name": name,
                "up": SparseConvLayer(rng, f"{name}.up", prev, dc, 2, stride=2,
                                      transposed=True, dtype=dtype),
                "norm": BatchNormLayer(f"{name}.norm", dc, dtype=dtype),
                "blocks": make_blocks(name, cat, dc, cfg.cardinalities[4 + j]),
                "out_channels": dc,
            }
            self.decoder.append(stage)
            prev = dc

        self.fc = LinearLayer(rng, "fc", prev, cfg.fc_dim, dtype=dtype)
        self.gem = GeMPoolLayer("gem", p_init=cfg.gem_p_init, dtype=dtype)

    # ---- parameter bookkeeping -------------------------------------------------

    def _all_layers(self):
        yield self.stem_conv
        yield self.stem_norm
        for stage in self.encoder + self.decoder:
            yield stage["down"] if "down" in stage else stage["up"]
            yield stage["norm"]
            yield from stage["blocks"]
        yield self.fc
        yield self.gem

    def blocks(self) -> list[MinkNeXtBlock]:
        out = []
        for stage in self.encoder + self.decoder:
            out.extend(stage["blocks"])
        return out

    def parameters(self) -> list[Var]:
        out = []
        for layer in self._all_layers():
            out.extend(layer.parameters())
        return out

    def named_parameters(self) -> dict[str, Var]:
        return {p.name: p for p in self.parameters()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self._all_layers():
            if hasattr(layer, "buffers"):
                out.update(layer.buffers())
        return out

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters().items()}
        out.update(self.named_buffers())
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]):
        params = self.named_parameters()
        for name, p in params.items():
            if name not in tensors:
                raise KeyError(f"checkpoint is missing tensor {name!r}")
            if tuple(tensors[name].shape) != tuple(p.data.shape):
                raise ValueError(f"shape mismatch for {name!r}")
            p.data = tensors[name].astype(self.dtype)
        for layer in self._all_layers():
            if not hasattr(layer, "buffers"):
                continue
            for name, buf in layer.buffers().items():
                if name in tensors:
                    buf[...] = tensors[name].astype(self.dtype)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def clamp_invariants(self):
        """Projection step after an optimizer update (GeM exponent >= 1)."""
        np.maximum(self.gem.p.data, 1.0, out=self.gem.p.data)

    # ---- coordinate planning ----------------------------------------------------

    def _plan(self, st: SparseTensor, batch_size: int) -> ForwardPlan:
        cfg = self.cfg
        plan = ForwardPlan(batch_size=batch_size)

        def block_kmaps(stage, cmap):
            sizes = set()
            for block in stage["blocks"]:
                sizes |= block.kernel_sizes_needed()
            return {k: build_kernel_map(cmap, cmap, k, 1) for k in sorted(sizes)}

        s = cfg.stem_stride
        map_in = build_coordinate_map(st.coords, 1)
        if s == 1:
            stem_map = map_in
            plan.kmaps["stem"] = build_kernel_map(map_in, map_in, cfg.stem_kernel, 1)
        else:
            stem_coords = stride_coords(st.coords, s, 1)
            stem_map = CoordinateMap(stem_coords, s)
            plan.kmaps["stem"] = build_kernel_map(map_in, stem_map, cfg.stem_kernel, s)
        plan.maps[s] = stem_map

        cur = stem_map
        for i, stage in enumerate(self.encoder):
            target = cur.tensor_stride * 2
            coords = stride_coords(cur.coords, target, cur.tensor_stride)
            nxt = CoordinateMap(coords, target)
            plan.maps[target] = nxt
            plan.kmaps[(stage["name"], "down")] = build_kernel_map(cur, nxt, 2, 2)
            plan.kmaps[(stage["name"], "blocks")] = block_kmaps(stage, nxt)
            cur = nxt

        for stage in self.decoder:
            target = cur.tensor_stride // 2
            nxt = plan.maps[target]  # cached encoder-side coordinates
            plan.kmaps[(stage["name"], "up")] = build_kernel_map(cur, nxt, 2, 2, transposed=True)
            plan.kmaps[(stage["name"], "blocks")] = block_kmaps(stage, nxt)
            cur = nxt

        plan.spans = batch_row_spans(cur.coords, batch_size)
        if any(start == stop for start, stop in plan.spans):
            raise ValueError("a cloud quantized to zero voxels at the output stride")
        plan.final_stride = cur.tensor_stride
        return plan

    # ---- numeric flow -------------------------------------------------------------

    def forward(self, clouds, training: bool = False, tape: Tape | None = None) -> Var:
        """Embed a batch of point clouds; returns a (B, fc_dim) descriptor Var.

        Eval-mode passes without a tape run one cloud at a time: no eval op
        mixes batch elements, and the per-element pass keeps descriptors
        bitwise independent of batch composition (a jointly batched pass can
        pick different BLAS kernels for different row counts).
        """
        if len(clouds) == 0:
            raise ValueError("empty input")
        if not training and tape is None and len(clouds) > 1:
            rows = [self.forward([cloud]).data[0] for cloud in clouds]
            return Var(np.stack(rows, axis=0))
        st = quantize_batch(clouds, self.quantization_scale, dtype=self.dtype)
        plan = self._plan(st, len(clouds))
        self.last_plan = plan
        cfg = self.cfg

        x = Var(st.features)
        stem_map = plan.maps[cfg.stem_stride]
        x = self.stem_conv.forward(tape, x, plan.kmaps["stem"], len(stem_map))
        x = self.stem_norm.forward(tape, x, training)
        x = _activation(tape, x, "relu")

        skips = {cfg.stem_stride: x}
        stride = cfg.stem_stride
        for stage in self.encoder:
            stride *= 2
            n = len(plan.maps[stride])
            x = stage["down"].forward(tape, x, plan.kmaps[(stage["name"], "down")], n)
            x = stage["norm"].forward(tape, x, training)
            x = _activation(tape, x, "relu")
            kmaps = plan.kmaps[(stage["name"], "blocks")]
            for block in stage["blocks"]:
                x = block.forward(tape, x, kmaps, n, training)
            skips[stride] = x

        for stage in self.decoder:
            stride //= 2
            n = len(plan.maps[stride])
            x = stage["up"].forward(tape, x, plan.kmaps[(stage["name"], "up")], n)
            x = stage["norm"].forward(tape, x, training)
            x = _activation(tape, x, "relu")
            x = _concat(tape, x, skips[stride])
            kmaps = plan.kmaps[(stage["name"], "blocks")]
            for block in stage["blocks"]:
                x = block.forward(tape, x, kmaps, n, training)

        x = self.fc.forward(tape, x)
        return self.gem.forward(tape, x, plan.spans)

    def embed(self, clouds) -> np.ndarray:
        """Eval-mode descriptors as a plain array."""
        return self.forward(clouds, training=False, tape=None).data


def build_model(cfg: ArchConfig, seed: int = 0, quantization_scale: float = 0.01,
                dtype=np.float32) -> Model:
    """Construct a model with Kaiming-uniform init, deterministic under the seed."""
    return Model(cfg, seed=seed, quantization_scale=quantization_scale, dtype=dtype)
