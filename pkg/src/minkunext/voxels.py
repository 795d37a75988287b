"""Voxel quantization, coordinate maps and kernel maps.

This is the combinatorial substrate of the sparse convolution engine:
point clouds are quantized onto an integer voxel grid, voxel coordinates
are hashed into a row-index bijection, and kernel maps enumerate the
(input row, output row) pairs that drive gather-GEMM-scatter convolution.

Coordinates are stored as int32 rows (batch, x, y, z), always sorted
lexicographically; iteration order is the sorted order, never hash order,
so results are reproducible across runs and platforms.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1

# Head-room (in voxel units per tensor_stride) added around the coordinate
# bounding box so that neighbour queries (coord + kernel offset) stay inside
# the injective packing range of the int64 hash keys.
_BOX_MARGIN = 64

_KEY_LIMIT = 2**62


def _check_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("empty input")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) point array, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("invalid point: non-finite coordinate")
    return pts


class SparseTensor:
    """Batched sparse voxel tensor: unique coordinates plus dense per-voxel features.

    coords:        (N, 4) int32, rows are (batch, x, y, z), sorted, pairwise distinct
    features:      (N, C) float matrix, row i belongs to coords[i]
    tensor_stride: grid spacing the coordinates live on (all of x, y, z are
                   integer multiples of it)
    """

    __slots__ = ("coords", "features", "tensor_stride")

    def __init__(self, coords: np.ndarray, features: np.ndarray, tensor_stride: int = 1):
        coords = np.ascontiguousarray(coords, dtype=np.int32)
        features = np.asarray(features)
        if coords.ndim != 2 or coords.shape[1] != 4:
            raise ValueError(f"coords must be (N, 4), got {coords.shape}")
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise ValueError(
                f"features must be (N, C) with N == {coords.shape[0]}, got {features.shape}"
            )
        if tensor_stride < 1:
            raise ValueError("tensor_stride must be positive")
        if coords.shape[0] and (coords[:, 1:] % tensor_stride).any():
            raise ValueError(f"coordinates are not multiples of tensor_stride {tensor_stride}")
        self.coords = coords
        self.features = features
        self.tensor_stride = int(tensor_stride)

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def assert_valid(self):
        """Full invariant check (pairwise-distinct, sorted); meant for tests."""
        u = np.unique(self.coords, axis=0)
        if u.shape[0] != self.coords.shape[0]:
            raise AssertionError("duplicate coordinates")
        if not np.array_equal(u, self.coords):
            raise AssertionError("coordinates are not in sorted order")

    def __repr__(self):
        return (
            f"SparseTensor(num_voxels={self.num_voxels}, channels={self.channels}, "
            f"tensor_stride={self.tensor_stride})"
        )


def quantize(points, qs: float, batch: int = 0, dtype=np.float32) -> SparseTensor:
    """Quantize a point cloud onto a voxel grid of cell size ``qs``.

    Voxel index is floor(point / qs) per axis; ties at cell boundaries
    resolve toward the lower cell. Duplicate voxels collapse to a single
    row whose feature is 1 (all input features are ones, so first
    occurrence wins trivially). Output coordinates are sorted by
    (batch, x, y, z).
    """
    if qs <= 0:
        raise ValueError("qs must be positive")
    if batch < 0:
        raise ValueError("batch index must be non-negative")
    pts = _check_points(points)
    ijk = np.floor(pts / qs)
    if (ijk < INT32_MIN).any() or (ijk > INT32_MAX).any():
        raise ValueError("voxel index exceeds 32-bit signed range")
    coords = np.empty((ijk.shape[0], 4), dtype=np.int32)
    coords[:, 0] = batch
    coords[:, 1:] = ijk.astype(np.int32)
    coords = np.unique(coords, axis=0)
    features = np.ones((coords.shape[0], 1), dtype=dtype)
    return SparseTensor(coords, features, tensor_stride=1)


def quantize_batch(clouds, qs: float, dtype=np.float32) -> SparseTensor:
    """Quantize a list of clouds into one batched sparse tensor (batch = list index)."""
    if len(clouds) == 0:
        raise ValueError("empty input")
    parts = [quantize(cloud, qs, batch=i, dtype=dtype) for i, cloud in enumerate(clouds)]
    coords = np.concatenate([p.coords for p in parts], axis=0)
    features = np.concatenate([p.features for p in parts], axis=0)
    # each part is sorted and batch indices increase, so the result is sorted
    return SparseTensor(coords, features, tensor_stride=1)


def stride_coords(coords: np.ndarray, target_stride: int, source_stride: int = 1) -> np.ndarray:
    """Map coordinates onto a coarser grid: floor-divide then re-multiply.

    Duplicates collapse; the result is sorted. ``target_stride`` must be a
    multiple of ``source_stride``.
    """
    if target_stride < 1 or source_stride < 1:
        raise ValueError("strides must be positive")
    if target_stride % source_stride != 0:
        raise ValueError(
            f"target stride {target_stride} is not a multiple of source stride {source_stride}"
        )
    coords = np.asarray(coords, dtype=np.int32)
    out = coords.copy()
    out[:, 1:] = (out[:, 1:] // target_stride) * target_stride
    return np.unique(out, axis=0)


def batch_row_spans(coords: np.ndarray, num_batches: int | None = None) -> list[tuple[int, int]]:
    """Row ranges [start, stop) per batch index; coords must be sorted."""
    if num_batches is None:
        num_batches = int(coords[:, 0].max()) + 1 if coords.shape[0] else 0
    bounds = np.searchsorted(coords[:, 0], np.arange(num_batches + 1))
    return [(int(bounds[i]), int(bounds[i + 1])) for i in range(num_batches)]


class CoordinateMap:
    """Bijection between sorted voxel coordinates and their row indices.

    Lookup packs (batch, x, y, z) into a single int64 key using mixed-radix
    place values derived from the coordinate bounding box (padded so that
    coord + kernel offset never wraps), then binary-searches the sorted key
    array. Keys are monotone in the lexicographic coordinate order, so the
    stored sorted coordinates double as the sorted key order.
    """

    def __init__(self, coords: np.ndarray, tensor_stride: int = 1):
        coords = np.ascontiguousarray(coords, dtype=np.int32)
        if coords.ndim != 2 or coords.shape[1] != 4 or coords.shape[0] == 0:
            raise ValueError("coords must be a non-empty (N, 4) array")
        self.coords = coords
        self.tensor_stride = int(tensor_stride)
        margin = _BOX_MARGIN * self.tensor_stride
        lo = coords.min(axis=0).astype(np.int64)
        hi = coords.max(axis=0).astype(np.int64)
        lo[1:] -= margin
        hi[1:] += margin
        spans = hi - lo + 1
        if int(spans[0]) * int(spans[1]) * int(spans[2]) * int(spans[3]) > _KEY_LIMIT:
            raise ValueError("coordinate range too large to hash")
        place = np.empty(4, dtype=np.int64)
        place[3] = 1
        place[2] = spans[3]
        place[1] = spans[2] * place[2]
        place[0] = spans[1] * place[1]
        self._lo = lo
        self._hi = hi
        self._place = place
        self._keys = self._pack(coords)

    def _pack(self, coords: np.ndarray) -> np.ndarray:
        return (coords.astype(np.int64) - self._lo) @ self._place

    def __len__(self) -> int:
        return self.coords.shape[0]

    def lookup(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized lookup. Returns (rows, found); rows are valid where found."""
        queries = np.asarray(queries, dtype=np.int64)
        inbox = ((queries >= self._lo) & (queries <= self._hi)).all(axis=1)
        safe = np.where(inbox[:, None], queries, self._lo)
        keys = (safe - self._lo) @ self._place
        idx = np.searchsorted(self._keys, keys)
        idx = np.minimum(idx, len(self._keys) - 1)
        found = inbox & (self._keys[idx] == keys)
        return idx, found

    def index_of(self, coord) -> int:
        """Row index of a single coordinate; raises KeyError if absent."""
        rows, found = self.lookup(np.asarray(coord, dtype=np.int64)[None, :])
        if not found[0]:
            raise KeyError(tuple(int(c) for c in coord))
        return int(rows[0])

    def __contains__(self, coord) -> bool:
        _, found = self.lookup(np.asarray(coord, dtype=np.int64)[None, :])
        return bool(found[0])


def build_coordinate_map(coords: np.ndarray, tensor_stride: int = 1) -> CoordinateMap:
    """Build the coord -> sorted-position bijection; rejects duplicate coordinates."""
    coords = np.asarray(coords, dtype=np.int32)
    uniq = np.unique(coords, axis=0)
    if uniq.shape[0] != coords.shape[0]:
        raise ValueError("duplicate coordinate")
    return CoordinateMap(uniq, tensor_stride)


def kernel_offsets(kernel_size: int) -> np.ndarray:
    """Offset region of a hypercubic kernel, lexicographic order, (K^3, 3).

    Odd kernels are centered: -(K-1)/2 .. (K-1)/2 per axis. Even kernels are
    non-centered: 0 .. K-1, which is what makes k=2/s=2 downsampling
    partition the grid exactly.
    """
    if kernel_size < 1:
        raise ValueError("kernel_size must be positive")
    if kernel_size % 2 == 1:
        r = range(-(kernel_size - 1) // 2, (kernel_size + 1) // 2)
    else:
        r = range(kernel_size)
    return np.array(list(itertools.product(r, r, r)), dtype=np.int32)


@dataclass
class KernelMap:
    """Per-kernel-offset (input row, output row) pair lists for one conv layer.

    For a fixed offset each output row appears at most once and each input
    row at most once (the offset shift is injective), so scatter-adds within
    one offset never collide; accumulation across offsets is done in offset
    order, giving deterministic results.
    """

    kernel_size: int
    stride: int
    transposed: bool
    offsets: np.ndarray  # (K^3, 3), already scaled to voxel units
    in_rows: list = field(repr=False, default_factory=list)
    out_rows: list = field(repr=False, default_factory=list)
    n_in: int = 0
    n_out: int = 0

    @property
    def num_offsets(self) -> int:
        return self.offsets.shape[0]

    @property
    def total_pairs(self) -> int:
        return sum(r.size for r in self.in_rows)

    @property
    def center_offset_index(self) -> int:
        if self.kernel_size % 2 == 0:
            raise ValueError("even kernels have no center offset")
        return (self.kernel_size**3 - 1) // 2

    def pairs(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        return self.in_rows[j], self.out_rows[j]


def build_kernel_map(
    in_map: CoordinateMap,
    out_map: CoordinateMap,
    kernel_size: int,
    stride: int,
    transposed: bool = False,
) -> KernelMap:
    """Enumerate the (in_row, out_row) pairs of a sparse (transpose) convolution.

    Plain convolution: for each output coordinate o and offset d, the pair
    (in_map[o + d], out_map[o]) is emitted iff the input coordinate exists.
    Offsets are scaled by the input tensor stride. Transpose convolution
    swaps the offset arithmetic: it scatters from each (coarse) input
    coordinate c to the (fine) output coordinate c + d, with offsets scaled
    by the output tensor stride.
    """
    if stride < 1:
        raise ValueError("stride must be positive")
    if transposed:
        if in_map.tensor_stride != stride * out_map.tensor_stride:
            raise ValueError(
                f"transpose stride mismatch: in {in_map.tensor_stride}, "
                f"out {out_map.tensor_stride}, stride {stride}"
            )
        scale = out_map.tensor_stride
        base = in_map.coords
        target = out_map
    else:
        if out_map.tensor_stride != stride * in_map.tensor_stride:
            raise ValueError(
                f"stride mismatch: in {in_map.tensor_stride}, "
                f"out {out_map.tensor_stride}, stride {stride}"
            )
        scale = in_map.tensor_stride
        base = out_map.coords
        target = in_map

    offsets = kernel_offsets(kernel_size) * scale
    kmap = KernelMap(
        kernel_size=kernel_size,
        stride=stride,
        transposed=transposed,
        offsets=offsets,
        n_in=len(in_map),
        n_out=len(out_map),
    )
    if kernel_size == 1 and stride == 1 and in_map is out_map:
        rows = np.arange(len(in_map), dtype=np.int64)
        kmap.in_rows.append(rows)
        kmap.out_rows.append(rows)
        return kmap

    query = base.astype(np.int64)
    # fast path: keys are mixed-radix, so shifting by an offset is a constant
    # int64 delta — valid when every shifted query stays inside the padded box
    lo = query.min(axis=0)
    hi = query.max(axis=0)
    max_off = np.abs(offsets).max(axis=0)
    affine = (
        lo[0] >= target._lo[0] and hi[0] <= target._hi[0]
        and (lo[1:] - max_off >= target._lo[1:]).all()
        and (hi[1:] + max_off <= target._hi[1:]).all()
    )
    base_keys = target._pack(query) if affine else None
    n_target = len(target)
    for off in offsets:
        if affine:
            keys = base_keys + off @ target._place[1:]
            idx = np.searchsorted(target._keys, keys)
            idx = np.minimum(idx, n_target - 1)
            found = target._keys[idx] == keys
            rows = idx
        else:
            q = query.copy()
            q[:, 1:] += off
            rows, found = target.lookup(q)
        sel = np.nonzero(found)[0]
        hit = rows[sel]
        if transposed:
            kmap.in_rows.append(sel.astype(np.int64))
            kmap.out_rows.append(hit.astype(np.int64))
        else:
            kmap.in_rows.append(hit.astype(np.int64))
            kmap.out_rows.append(sel.astype(np.int64))
    return kmap
