#!/usr/bin/env python3
"""Walkthrough: point cloud -> sparse tensor -> kernel map -> sparse convolution.

Quantizes a random cloud, inspects the coordinate bookkeeping, runs one
sparse convolution, and cross-checks it against the brute-force dense
reference.
"""

import numpy as np

from minkunext import build_coordinate_map, build_kernel_map, quantize, stride_coords
from minkunext.ops import sparse_conv
from minkunext.reference import dense_conv3d

rng = np.random.default_rng(0)

print("== quantization ==")
cloud = rng.uniform(-1, 1, size=(500, 3))
st = quantize(cloud, qs=0.1)
print(f"{cloud.shape[0]} points -> {st.num_voxels} voxels at stride {st.tensor_stride}")
print(f"first voxels:\n{st.coords[:4]}")
print(f"features are ones: {st.features[:4].ravel()}")

print("\n== stride arithmetic ==")
coarse = stride_coords(st.coords, 2, 1)
print(f"stride 1 -> 2: {st.num_voxels} -> {len(coarse)} voxels")

print("\n== kernel map ==")
cmap = build_coordinate_map(st.coords, 1)
kmap = build_kernel_map(cmap, cmap, kernel_size=3, stride=1)
center = kmap.center_offset_index
print(f"K=3 gives {kmap.num_offsets} offsets, {kmap.total_pairs} (in,out) pairs total")
print(f"center offset pairs = every voxel with itself: {kmap.pairs(center)[0].size} pairs")

print("\n== sparse convolution vs dense reference ==")
weights = rng.standard_normal((27, 1, 4))
out, _ = sparse_conv(st.features.astype(np.float64), weights, None, kmap, st.num_voxels)
ref_coords, ref = dense_conv3d(st.coords, st.features.astype(np.float64), weights, 3, 1)
print(f"output: {out.shape}, max |engine - dense reference| = {np.abs(out - ref).max():.2e}")
