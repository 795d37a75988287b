"""Finite-difference validation of every analytic backward.

Central differences with step 1e-5 in double precision; an entry passes if
its relative error is at most 1e-4, measured only where either gradient
exceeds 1e-6 in magnitude.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .autodiff import Tape, Var
from .loss import LossConfig, tsap_loss
from .model import ArchConfig, build_model
from .voxels import build_coordinate_map, build_kernel_map, stride_coords, CoordinateMap

FD_STEP = 1e-5
REL_TOL = 1e-4
GRAD_FLOOR = 1e-6


def central_diff(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Elementwise central-difference gradient of a scalar-valued f."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_rel_error(analytic, numeric, floor: float = GRAD_FLOOR) -> float:
    """Largest relative error over entries where either gradient is non-tiny."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    mask = (np.abs(analytic) > floor) | (np.abs(numeric) > floor)
    if not mask.any():
        return 0.0
    denom = np.maximum(np.abs(analytic[mask]), np.abs(numeric[mask]))
    return float((np.abs(analytic[mask] - numeric[mask]) / denom).max())


def _random_grid_instance(rng, grid=4, channels=2, occupancy=0.5):
    from .reference import random_sparse_instance

    coords, feats = random_sparse_instance(rng, grid, channels, occupancy)
    return coords, feats


def _weighted_sum(out, w):
    return float((out * w).sum())


def check_sparse_conv(seed=0):
    rng = np.random.default_rng(seed)
    coords, feats = _random_grid_instance(rng, grid=4, channels=2)
    in_map = build_coordinate_map(coords, 1)
    kmap = build_kernel_map(in_map, in_map, 3, 1)
    weights = rng.standard_normal((27, 2, 3))
    bias = rng.standard_normal(3)
    wsum = rng.standard_normal((len(in_map), 3))

    out, ctx = ops.sparse_conv(feats, weights, bias, kmap, len(in_map))
    gf, gw, gb = ops.sparse_conv_backward(ctx, wsum)
    errs = [
        max_rel_error(gf, central_diff(
            lambda x: _weighted_sum(ops.sparse_conv(x, weights, bias, kmap, len(in_map))[0], wsum), feats)),
        max_rel_error(gw, central_diff(
            lambda w: _weighted_sum(ops.sparse_conv(feats, w, bias, kmap, len(in_map))[0], wsum), weights)),
        max_rel_error(gb, central_diff(
            lambda b: _weighted_sum(ops.sparse_conv(feats, weights, b, kmap, len(in_map))[0], wsum), bias)),
    ]
    return max(errs)


def check_sparse_conv_transpose(seed=0):
    rng = np.random.default_rng(seed)
    coords, feats = _random_grid_instance(rng, grid=4, channels=3)
    fine = build_coordinate_map(coords, 1)
    coarse_coords = stride_coords(coords, 2, 1)
    coarse = CoordinateMap(coarse_coords, 2)
    kmap = build_kernel_map(coarse, fine, 2, 2, transposed=True)
    cfeats = rng.standard_normal((len(coarse), 3))
    weights = rng.standard_normal((8, 3, 2))
    wsum = rng.standard_normal((len(fine), 2))

    out, ctx = ops.sparse_conv_transpose(cfeats, weights, None, kmap, len(fine))
    gf, gw, _ = ops.sparse_conv_backward(ctx, wsum)
    errs = [
        max_rel_error(gf, central_diff(
            lambda x: _weighted_sum(ops.sparse_conv_transpose(x, weights, None, kmap, len(fine))[0], wsum), cfeats)),
        max_rel_error(gw, central_diff(
            lambda w: _weighted_sum(ops.sparse_conv_transpose(cfeats, w, None, kmap, len(fine))[0], wsum), weights)),
    ]
    return max(errs)


def _check_norm(seed, training):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((8, 4))
    gamma = rng.uniform(0.5, 1.5, 4)
    beta = rng.standard_normal(4)
    wsum = rng.standard_normal((8, 4))
    rm = rng.standard_normal(4)
    rv = rng.uniform(0.5, 2.0, 4)

    def run(x_, gamma_, beta_):
        out, _ = ops.batch_norm(x_, gamma_, beta_, rm.copy(), rv.copy(), training)
        return _weighted_sum(out, wsum)

    out, ctx = ops.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), training)
    gx, gg, gb = ops.batch_norm_backward(ctx, wsum)
    return max(
        max_rel_error(gx, central_diff(lambda v: run(v, gamma, beta), x)),
        max_rel_error(gg, central_diff(lambda v: run(x, v, beta), gamma)),
        max_rel_error(gb, central_diff(lambda v: run(x, gamma, v), beta)),
    )


def check_batch_norm(seed=0):
    return max(_check_norm(seed, True), _check_norm(seed + 1, False))


def check_layer_norm(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 5))
    gamma = rng.uniform(0.5, 1.5, 5)
    beta = rng.standard_normal(5)
    wsum = rng.standard_normal((6, 5))

    def run(x_, gamma_, beta_):
        return _weighted_sum(ops.layer_norm(x_, gamma_, beta_)[0], wsum)

    out, ctx = ops.layer_norm(x, gamma, beta)
    gx, gg, gb = ops.layer_norm_backward(ctx, wsum)
    return max(
        max_rel_error(gx, central_diff(lambda v: run(v, gamma, beta), x)),
        max_rel_error(gg, central_diff(lambda v: run(x, v, beta), gamma)),
        max_rel_error(gb, central_diff(lambda v: run(x, gamma, v), beta)),
    )


def check_relu(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 4))
    x[np.abs(x) < 0.05] += 0.2  # keep away from the kink
    wsum = rng.standard_normal(x.shape)
    out, ctx = ops.relu(x)
    (gx,) = ops.relu_backward(ctx, wsum)
    return max_rel_error(gx, central_diff(lambda v: _weighted_sum(ops.relu(v)[0], wsum), x))


def check_gelu(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 4)) * 2.0
    wsum = rng.standard_normal(x.shape)
    out, ctx = ops.gelu(x)
    (gx,) = ops.gelu_backward(ctx, wsum)
    return max_rel_error(gx, central_diff(lambda v: _weighted_sum(ops.gelu(v)[0], wsum), x))


def check_linear(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 3))
    w = rng.standard_normal((3, 4))
    b = rng.standard_normal(4)
    wsum = rng.standard_normal((6, 4))
    out, ctx = ops.linear(x, w, b)
    gx, gw, gb = ops.linear_backward(ctx, wsum)
    return max(
        max_rel_error(gx, central_diff(lambda v: _weighted_sum(ops.linear(v, w, b)[0], wsum), x)),
        max_rel_error(gw, central_diff(lambda v: _weighted_sum(ops.linear(x, v, b)[0], wsum), w)),
        max_rel_error(gb, central_diff(lambda v: _weighted_sum(ops.linear(x, w, v)[0], wsum), b)),
    )


def check_concat(seed=0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((5, 2))
    b = rng.standard_normal((5, 3))
    wsum = rng.standard_normal((5, 5))
    out, ctx = ops.concat_features(a, b)
    ga, gb = ops.concat_features_backward(ctx, wsum)
    return max(
        max_rel_error(ga, central_diff(lambda v: _weighted_sum(ops.concat_features(v, b)[0], wsum), a)),
        max_rel_error(gb, central_diff(lambda v: _weighted_sum(ops.concat_features(a, v)[0], wsum), b)),
    )


def check_gem(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 2.0, size=(7, 4))
    x[np.abs(x - ops.GEM_EPS) < 1e-3] += 0.1  # keep away from the clamp
    p = 2.7
    wsum = rng.standard_normal(4)
    out, ctx = ops.gem_pool(x, p)
    gx, gp = ops.gem_pool_backward(ctx, wsum)
    err_x = max_rel_error(gx, central_diff(
        lambda v: _weighted_sum(ops.gem_pool(v, p)[0], wsum), x))
    err_p = max_rel_error(np.array([gp]), central_diff(
        lambda v: _weighted_sum(ops.gem_pool(x, float(v[0]))[0], wsum), np.array([p])))
    return max(err_x, err_p)


def check_tsap(seed=0):
    rng = np.random.default_rng(seed)
    b, d = 8, 4
    desc = rng.standard_normal((b, d))
    group = rng.integers(0, 3, size=b)
    pos = (group[:, None] == group[None, :]) & ~np.eye(b, dtype=bool)
    neg = group[:, None] != group[None, :]
    cfg = LossConfig(tau=0.1, k=2, batch_size=b)

    loss, grad, _ = tsap_loss(desc, pos, neg, cfg)
    fd = central_diff(lambda v: tsap_loss(v, pos, neg, cfg)[0], desc)
    return max_rel_error(grad, fd)


def check_composed_graph(seed=0):
    """conv -> batch norm -> relu -> gem pooling, differentiated via the tape."""
    rng = np.random.default_rng(seed)
    coords, feats = _random_grid_instance(rng, grid=3, channels=2, occupancy=0.7)
    cmap = build_coordinate_map(coords, 1)
    kmap = build_kernel_map(cmap, cmap, 3, 1)
    n = len(cmap)
    weights = rng.standard_normal((27, 2, 3))
    gamma = rng.uniform(0.5, 1.5, 3)
    beta = rng.standard_normal(3)
    wsum = rng.standard_normal(3)

    leaves = {"feats": feats, "weights": weights, "gamma": gamma, "beta": beta}

    def run(vals, record=False):
        tape = Tape() if record else None
        vs = {k: Var(v) for k, v in vals.items()}
        out, ctx = ops.sparse_conv(vs["feats"].data, vs["weights"].data, None, kmap, n)
        conv = Var(out)
        if record:
            tape.record(conv, (vs["feats"], vs["weights"]),
                        lambda g: ops.sparse_conv_backward(ctx, g)[:2])
        rm, rv = np.zeros(3), np.ones(3)
        out2, ctx2 = ops.batch_norm(conv.data, vs["gamma"].data, vs["beta"].data, rm, rv, True)
        normed = Var(out2)
        if record:
            tape.record(normed, (conv, vs["gamma"], vs["beta"]),
                        lambda g: ops.batch_norm_backward(ctx2, g))
        out3, ctx3 = ops.relu(normed.data)
        hot = Var(out3)
        if record:
            tape.record(hot, (normed,), lambda g: ops.relu_backward(ctx3, g))
        pooled, ctx4 = ops.gem_pool(hot.data, 3.0)
        pool_var = Var(pooled)
        if record:
            tape.record(pool_var, (hot,), lambda g: (ops.gem_pool_backward(ctx4, g)[0],))
        loss = Var(np.asarray((pool_var.data * wsum).sum()))
        if record:
            tape.record(loss, (pool_var,), lambda g: (g * wsum,))
        return loss, tape, vs

    loss, tape, vs = run(leaves, record=True)
    grads = tape.backward(loss)
    worst = 0.0
    for key in leaves:
        fd = central_diff(
            lambda v, key=key: float(run({**leaves, key: v})[0].data), leaves[key])
        worst = max(worst, max_rel_error(grads[vs[key]], fd))
    return worst


def check_end_to_end_model(seed=0, samples_per_tensor=2):
    """Finite differences through the full tiny network, sampling entries of
    every parameter tensor.

    The network contains kinks (ReLU, the GeM clamp), and a probe interval
    straddling one biases the central difference no matter the step, so each
    sampled entry is checked against a ladder of decreasing steps and, if
    that still disagrees, re-checked at a shifted base point where the kink
    no longer sits inside the probe. A wrong backward fails everywhere.
    """
    rng = np.random.default_rng(seed)
    cfg = ArchConfig(
        encoder_channels=(2, 2, 3, 3), decoder_channels=(3, 2), num_skips=2,
        cardinalities=(1,) * 6, stem_kernel=3, fc_dim=4,
    )
    model = build_model(cfg, seed=seed, quantization_scale=0.25, dtype=np.float64)
    clouds = [rng.uniform(-1, 1, size=(30, 3)) for _ in range(2)]
    wsum = rng.standard_normal((2, cfg.fc_dim))

    def loss_value():
        return float((model.forward(clouds, training=True, tape=None).data * wsum).sum())

    def all_gradients():
        tape = Tape()
        out = model.forward(clouds, training=True, tape=tape)
        loss = Var(np.asarray((out.data * wsum).sum()))
        tape.record(loss, (out,), lambda g: (g * wsum,))
        return tape.backward(loss)

    def gradient_of(p, grads=None):
        g = (grads if grads is not None else all_gradients()).get(p)
        return np.zeros_like(p.data) if g is None else g

    def central(flat, i, step):
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_value()
        flat[i] = orig - step
        lo = loss_value()
        flat[i] = orig
        return (hi - lo) / (2 * step)

    def entry_error(p, flat, gflat, i):
        best = np.inf
        for step in (FD_STEP, FD_STEP / 10, FD_STEP / 100):
            fd = central(flat, i, step)
            best = min(best, max_rel_error(np.array([gflat[i]]), np.array([fd])))
            if best <= REL_TOL:
                return best
        # probe may sit on a kink: move the base point and compare there
        orig = flat[i]
        flat[i] = orig + 100 * FD_STEP
        shifted_g = gradient_of(p).reshape(-1)
        fd = central(flat, i, FD_STEP)
        best = min(best, max_rel_error(np.array([shifted_g[i]]), np.array([fd])))
        flat[i] = orig
        return best

    base_grads = all_gradients()
    worst = 0.0
    for p in model.parameters():
        gflat = gradient_of(p, base_grads).reshape(-1)
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples_per_tensor, flat.size), replace=False)
        for i in picks:
            worst = max(worst, entry_error(p, flat, gflat, i))
    return worst


CHECKS = {
    "sparse_conv": check_sparse_conv,
    "sparse_conv_transpose": check_sparse_conv_transpose,
    "batch_norm": check_batch_norm,
    "layer_norm": check_layer_norm,
    "relu": check_relu,
    "gelu": check_gelu,
    "linear": check_linear,
    "concat": check_concat,
    "gem_pool": check_gem,
    "tsap_loss": check_tsap,
    "composed_graph": check_composed_graph,
    "end_to_end_model": check_end_to_end_model,
}


def run_gradcheck_suite(op: str | None = None, seed: int = 0) -> dict[str, float]:
    """Run one or all finite-difference checks; returns max relative error per op."""
    names = [op] if op else list(CHECKS)
    results = {}
    for name in names:
        if name not in CHECKS:
            raise KeyError(f"unknown op {name!r}; choose from {list(CHECKS)}")
        results[name] = CHECKS[name](seed=seed)
    return results
