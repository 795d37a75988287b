"""Differentiable primitives over sparse-tensor feature matrices.

Every operation comes as a forward returning ``(output, ctx)`` plus a
``*_backward(ctx, grad_out)`` returning gradients in the same order as the
differentiable inputs. Backwards are analytic and are validated against
central finite differences by the gradient-check suite.

Convolutions are gather-GEMM-scatter: per kernel offset, gather the input
rows named by the kernel map, multiply by that offset's weight slice, and
scatter-add into the output rows. Within one offset the output rows are
pairwise distinct (see KernelMap), so a plain fancy-indexed ``+=`` is exact;
offsets accumulate in a fixed order, making the result deterministic.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .voxels import KernelMap, SparseTensor

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

GEM_EPS = 1e-6
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-6


def _check_kmap(features: np.ndarray, weights: np.ndarray, kmap: KernelMap):
    k3, c_in, _ = weights.shape
    if features.shape[1] != c_in:
        raise ValueError(f"channel mismatch: features have {features.shape[1]}, weights expect {c_in}")
    if kmap.num_offsets != k3:
        raise ValueError(f"kernel map has {kmap.num_offsets} offsets, weights have {k3}")
    if kmap.n_in != features.shape[0]:
        raise ValueError(f"kernel map built for {kmap.n_in} input rows, features have {features.shape[0]}")


def sparse_conv(features, weights, bias, kmap: KernelMap, num_out: int):
    """Generalized sparse convolution. weights: (K^3, C_in, C_out).

    Per kernel offset: gather the paired input rows, multiply by that
    offset's weight slice, scatter-add into the output rows. Within one
    offset the output rows are pairwise distinct (see KernelMap), so the
    fancy-indexed += is exact; offsets accumulate in a fixed order, pairs in
    sorted order, making the result deterministic.
    """
    _check_kmap(features, weights, kmap)
    if kmap.n_out != num_out:
        raise ValueError(f"kernel map built for {kmap.n_out} output rows, requested {num_out}")
    k3, c_in, c_out = weights.shape
    w = weights.astype(features.dtype, copy=False)
    out = np.zeros((num_out, c_out), dtype=features.dtype)
    for j in range(k3):
        ir, orow = kmap.pairs(j)
        if ir.size:
            out[orow] += features[ir] @ w[j]
    if bias is not None:
        out = out + bias
    ctx = (features, weights, bias is not None, kmap)
    return out, ctx


def sparse_conv_backward(ctx, grad_out):
    features, weights, has_bias, kmap = ctx
    k3 = weights.shape[0]
    grad_feat = np.zeros_like(features)
    grad_w = np.zeros_like(weights)
    w = weights.astype(features.dtype, copy=False)
    for j in range(k3):
        ir, orow = kmap.pairs(j)
        if ir.size == 0:
            continue
        g = grad_out[orow]
        grad_feat[ir] += g @ w[j].T
        grad_w[j] = features[ir].T @ g
    grad_b = grad_out.sum(axis=0) if has_bias else None
    return grad_feat, grad_w, grad_b


def sparse_conv_transpose(features, weights, bias, kmap: KernelMap, num_out: int):
    """Transpose (upsampling) convolution; the kernel map must be transposed."""
    if not kmap.transposed:
        raise ValueError("sparse_conv_transpose requires a transposed kernel map")
    return sparse_conv(features, weights, bias, kmap, num_out)


sparse_conv_transpose_backward = sparse_conv_backward


def batch_norm(features, gamma, beta, running_mean, running_var, training,
               momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel normalization over all voxel rows of the batch.

    Training mode normalizes with batch statistics (biased variance) and
    updates the running stats in place (unbiased variance, standard
    convention); eval mode normalizes with the running stats.
    """
    if features.shape[1] != gamma.shape[0]:
        raise ValueError("channel mismatch in batch_norm")
    if training:
        n = features.shape[0]
        if n < 2:
            raise ValueError("degenerate batch: batch_norm needs at least 2 rows in training mode")
        mean = features.mean(axis=0)
        var = features.var(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (features - mean) * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (features - running_mean) * inv
    out = gamma * xhat + beta
    ctx = (training, xhat, inv, gamma)
    return out, ctx


def batch_norm_backward(ctx, grad_out):
    training, xhat, inv, gamma = ctx
    grad_gamma = (grad_out * xhat).sum(axis=0)
    grad_beta = grad_out.sum(axis=0)
    gxhat = grad_out * gamma
    if training:
        grad_x = inv * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
    else:
        grad_x = gxhat * inv
    return grad_x, grad_gamma, grad_beta


def layer_norm(features, gamma, beta, eps=LN_EPS):
    """Normalize each row over its channels, then apply the per-channel affine."""
    if features.shape[1] != gamma.shape[0]:
        raise ValueError("channel mismatch in layer_norm")
    mean = features.mean(axis=1, keepdims=True)
    var = features.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (features - mean) * inv
    out = gamma * xhat + beta
    ctx = (xhat, inv, gamma)
    return out, ctx


def layer_norm_backward(ctx, grad_out):
    xhat, inv, gamma = ctx
    grad_gamma = (grad_out * xhat).sum(axis=0)
    grad_beta = grad_out.sum(axis=0)
    gxhat = grad_out * gamma
    grad_x = inv * (
        gxhat
        - gxhat.mean(axis=1, keepdims=True)
        - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)
    )
    return grad_x, grad_gamma, grad_beta


def relu(features):
    out = np.maximum(features, 0)
    ctx = features > 0
    return out, ctx


def relu_backward(ctx, grad_out):
    return (grad_out * ctx,)


def gelu(features):
    """x * Phi(x) with the exact erf-based standard normal CDF."""
    cdf = 0.5 * (1.0 + erf(features / _SQRT2))
    out = features * cdf
    ctx = (features, cdf)
    return out, ctx


def gelu_backward(ctx, grad_out):
    x, cdf = ctx
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return (grad_out * (cdf + x * pdf),)


def linear(features, weights, bias):
    """Per-row fully connected transform: features @ weights (+ bias)."""
    if features.shape[1] != weights.shape[0]:
        raise ValueError("channel mismatch in linear")
    out = features @ weights
    if bias is not None:
        out = out + bias
    ctx = (features, weights, bias is not None)
    return out, ctx


def linear_backward(ctx, grad_out):
    features, weights, has_bias = ctx
    grad_x = grad_out @ weights.T
    grad_w = features.T @ grad_out
    grad_b = grad_out.sum(axis=0) if has_bias else None
    return grad_x, grad_w, grad_b


def concat_features(feat_a, feat_b):
    """Channelwise concatenation of row-aligned feature matrices."""
    if feat_a.shape[0] != feat_b.shape[0]:
        raise ValueError("row count mismatch in concat")
    out = np.concatenate([feat_a, feat_b], axis=1)
    ctx = feat_a.shape[1]
    return out, ctx


def concat_features_backward(ctx, grad_out):
    return grad_out[:, :ctx], grad_out[:, ctx:]


def concat_channels(a: SparseTensor, b: SparseTensor) -> SparseTensor:
    """Fuse two sparse tensors defined on identical coordinates by channel concat."""
    if a.tensor_stride != b.tensor_stride or a.coords.shape != b.coords.shape \
            or not np.array_equal(a.coords, b.coords):
        raise ValueError("coordinate sets differ: cannot concatenate channels")
    feats, _ = concat_features(a.features, b.features)
    return SparseTensor(a.coords, feats, a.tensor_stride)


def gem_pool(features, p, eps=GEM_EPS):
    """Generalized mean pooling of one batch element's (N, C) features to (C,).

    out_c = ((1/N) sum_n max(f_nc, eps)^p)^(1/p); eps clamping keeps real
    powers defined for negative activations.
    """
    n = features.shape[0]
    if n == 0:
        raise ValueError("empty descriptor set")
    p = float(p)
    clamped = np.maximum(features, eps)
    powered = clamped**p
    s = powered.mean(axis=0)
    out = s ** (1.0 / p)
    ctx = (features, clamped, powered, s, out, p, eps)
    return out, ctx


def gem_pool_backward(ctx, grad_out):
    features, clamped, powered, s, out, p, eps = ctx
    n = features.shape[0]
    # d out_c / d f_nc = (1/N) * m^(p-1) * s^(1/p - 1) on the unclamped entries
    scale = grad_out * out / s / n
    grad_feat = scale * clamped ** (p - 1.0) * (features > eps)
    # d out_c / d p via out = exp(log(s)/p), ds/dp = mean(m^p log m)
    ds_dp = (powered * np.log(clamped)).mean(axis=0)
    dout_dp = out * (ds_dp / (p * s) - np.log(s) / (p * p))
    grad_p = float((grad_out * dout_dp).sum())
    return grad_feat, grad_p
