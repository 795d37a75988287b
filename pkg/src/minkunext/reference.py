"""Brute-force dense reference for the sparse convolution engine.

Independent oracle: the sparse tensor is literally densified onto a zero
grid, the convolution is evaluated by direct summation over the kernel
offset region, and the result is restricted to the occupied output
coordinates (recomputed here by plain floor arithmetic). Nothing from the
gather-GEMM-scatter path is reused.
"""

from __future__ import annotations

import itertools

import numpy as np


def _offset_range(kernel_size: int):
    if kernel_size % 2 == 1:
        return range(-(kernel_size - 1) // 2, (kernel_size + 1) // 2)
    return range(kernel_size)


def dense_conv3d(coords, features, weights, kernel_size, stride, tensor_stride=1):
    """Dense 3D convolution of the densified grid at the occupied outputs.

    coords: (N, 4) int rows (batch, x, y, z) at ``tensor_stride``
    weights: (K^3, C_in, C_out), offsets enumerated lexicographically
    Returns (out_coords, out_features) with out_coords sorted.
    """
    coords = np.asarray(coords)
    features = np.asarray(features)
    k3, c_in, c_out = weights.shape
    assert k3 == kernel_size**3

    table = {tuple(int(v) for v in c): features[i] for i, c in enumerate(coords)}

    out_stride = tensor_stride * stride
    out_set = set()
    for c in coords:
        b, x, y, z = (int(v) for v in c)
        out_set.add((
            b,
            (x // out_stride) * out_stride,
            (y // out_stride) * out_stride,
            (z // out_stride) * out_stride,
        ))
    out_coords = sorted(out_set)

    offsets = list(itertools.product(_offset_range(kernel_size), repeat=3))
    out_features = np.zeros((len(out_coords), c_out), dtype=np.float64)
    for row, (b, x, y, z) in enumerate(out_coords):
        acc = np.zeros(c_out, dtype=np.float64)
        for j, (dx, dy, dz) in enumerate(offsets):
            src = (b, x + dx * tensor_stride, y + dy * tensor_stride, z + dz * tensor_stride)
            feat = table.get(src)
            if feat is not None:
                acc += feat.astype(np.float64) @ weights[j].astype(np.float64)
        out_features[row] = acc
    return np.array(out_coords, dtype=np.int32), out_features


def random_sparse_instance(rng, grid, channels, occupancy, batch=1, tensor_stride=1):
    """Random occupied coordinates on a ``grid``^3 box with random features."""
    cells = np.array(list(itertools.product(range(grid), repeat=3)), dtype=np.int64)
    coords = []
    for b in range(batch):
        n = max(1, int(round(occupancy * len(cells))))
        pick = rng.choice(len(cells), size=n, replace=False)
        block = np.empty((n, 4), dtype=np.int64)
        block[:, 0] = b
        block[:, 1:] = cells[pick] * tensor_stride
        coords.append(block)
    coords = np.concatenate(coords, axis=0)
    order = np.lexsort((coords[:, 3], coords[:, 2], coords[:, 1], coords[:, 0]))
    coords = coords[order].astype(np.int32)
    features = rng.standard_normal((coords.shape[0], channels))
    return coords, features
