"""Dataset handling: submap records, benchmark binary IO, UTM labelling,
batch sampling, augmentation, and the synthetic place generator.

A dataset is a directory with an ``index.txt`` (tab-separated columns:
relative_path, northing, easting, split, region) plus the referenced submap
files. A submap file is a flat sequence of 64-bit little-endian floats,
row-major (x, y, z per point). The traversal ("run") of a submap is the name
of its parent directory, e.g. ``synthetic/run_03/000042.bin`` belongs to run
``run_03``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .loss import LossConfig

RELATION_POSITIVE = 1
RELATION_IGNORED = 0
RELATION_NEGATIVE = -1


@dataclass(frozen=True)
class LabelConfig:
    positive_radius: float = 10.0
    negative_radius: float = 50.0
    success_radius: float = 25.0

    def __post_init__(self):
        if not self.positive_radius < self.negative_radius:
            raise ValueError("positive_radius must be smaller than negative_radius")


@dataclass(frozen=True)
class AugmentConfig:
    jitter_max: float = 0.001
    global_shift_max: float = 0.01
    drop_fraction: float = 0.10

    def __post_init__(self):
        if min(self.jitter_max, self.global_shift_max, self.drop_fraction) < 0:
            raise ValueError("augmentation magnitudes must be non-negative")
        if self.drop_fraction >= 1:
            raise ValueError("drop_fraction must be < 1")


@dataclass
class SubmapRecord:
    id: int
    cloud: np.ndarray  # (N, 3) float64
    utm: tuple[float, float]  # (northing, easting), meters
    split: str  # train | test
    region: str
    run: str = ""

    def __post_init__(self):
        if not np.isfinite(self.utm).all():
            raise ValueError("UTM coordinates must be finite")


# ---- submap binary format ------------------------------------------------------


def load_submap_bin(path) -> np.ndarray:
    """Read one submap: flat 64-bit LE floats, (x, y, z) per point, row-major."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % 24 != 0:
        raise ValueError(f"malformed submap {path}: {len(raw)} bytes is not a multiple of 24")
    pts = np.frombuffer(raw, dtype="<f8").reshape(-1, 3)
    return pts.copy()


def write_submap_bin(path, points):
    pts = np.ascontiguousarray(points, dtype="<f8")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must be (N, 3)")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(pts.tobytes())


# ---- dataset index -------------------------------------------------------------


def write_dataset(records: list[SubmapRecord], out_dir):
    """Persist records as submap files plus index.txt, in record order."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        rel = f"{rec.region}/{rec.run}/{rec.id:06d}.bin"
        write_submap_bin(out_dir / rel, rec.cloud)
        lines.append(f"{rel}\t{rec.utm[0]:.6f}\t{rec.utm[1]:.6f}\t{rec.split}\t{rec.region}")
    (out_dir / "index.txt").write_text("\n".join(lines) + "\n")


def load_dataset(data_dir) -> list[SubmapRecord]:
    """Load all records named by ``index.txt``; ids are assigned by line order."""
    data_dir = Path(data_dir)
    index = data_dir / "index.txt"
    if not index.exists():
        raise FileNotFoundError(f"no index.txt in {data_dir}")
    records = []
    for i, line in enumerate(index.read_text().splitlines()):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rel, northing, easting, split, region = line.split("\t")
        cloud = load_submap_bin(data_dir / rel)
        records.append(SubmapRecord(
            id=i, cloud=cloud, utm=(float(northing), float(easting)),
            split=split, region=region, run=Path(rel).parent.name,
        ))
    return records


# ---- labelling -----------------------------------------------------------------


def utm_matrix(records: list[SubmapRecord]) -> np.ndarray:
    return np.array([r.utm for r in records], dtype=np.float64)


def label_pairs(records: list[SubmapRecord], cfg: LabelConfig) -> np.ndarray:
    """Pairwise relation matrix: +1 positive (d <= p), -1 negative (d > n),
    0 ignored (between the thresholds). Symmetric by construction."""
    utm = utm_matrix(records)
    diff = utm[:, None, :] - utm[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2))
    rel = np.zeros(d.shape, dtype=np.int8)
    rel[d <= cfg.positive_radius] = RELATION_POSITIVE
    rel[d > cfg.negative_radius] = RELATION_NEGATIVE
    return rel


def relation_masks(rel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(positives, negatives) boolean masks with the diagonal cleared."""
    off_diag = ~np.eye(rel.shape[0], dtype=bool)
    return (rel == RELATION_POSITIVE) & off_diag, (rel == RELATION_NEGATIVE) & off_diag


# ---- batch sampling ------------------------------------------------------------


def _positive_components(records, label_cfg) -> list[list[int]]:
    """Connected components of the positive-pair graph (union-find)."""
    n = len(records)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    utm = utm_matrix(records)
    diff = utm[:, None, :] - utm[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2))
    ii, jj = np.nonzero(np.triu(d <= label_cfg.positive_radius, k=1))
    for a, b in zip(ii, jj):
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            parent[rb] = ra
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def epoch_batches(records: list[SubmapRecord], loss_cfg: LossConfig,
                  label_cfg: LabelConfig, rng: np.random.Generator) -> list[list[int]]:
    """Partition the eligible queries of one epoch into batches.

    Every element of a batch gets at least min(k, available) in-batch
    positives: place groups (positive-graph components) are kept together,
    and groups larger than the batch size are split into chunks of at least
    k+1 members. Records without any positive are not eligible and are left
    out. Returns lists of indices into ``records``.
    """
    comps = [c for c in _positive_components(records, label_cfg) if len(c) >= 2]
    if not comps:
        raise ValueError("no query with any positive")
    b = loss_cfg.batch_size
    k = loss_cfg.k

    chunks: list[list[int]] = []
    for comp in comps:
        comp = list(comp)
        rng.shuffle(comp)
        if len(comp) <= b:
            chunks.append(comp)
            continue
        pieces = [comp[i:i + b] for i in range(0, len(comp), b)]
        if len(pieces[-1]) < k + 1 and len(pieces) > 1:
            # rebalance the tail so every piece keeps the positive quota
            short = k + 1 - len(pieces[-1])
            pieces[-1] = pieces[-2][-short:] + pieces[-1]
            pieces[-2] = pieces[-2][:-short]
        chunks.extend(p for p in pieces if p)

    order = rng.permutation(len(chunks))
    batches: list[list[int]] = []
    for idx in order:
        chunk = chunks[idx]
        placed = False
        for batch in batches:
            if len(batch) + len(chunk) <= b:
                batch.extend(chunk)
                placed = True
                break
        if not placed:
            batches.append(list(chunk))
    return batches


def sample_batch(records: list[SubmapRecord], loss_cfg: LossConfig,
                 label_cfg: LabelConfig, rng: np.random.Generator) -> list[int]:
    """One batch of record indices (the first batch of a fresh epoch shuffle)."""
    return epoch_batches(records, loss_cfg, label_cfg, rng)[0]


# ---- augmentation --------------------------------------------------------------


def augment(points: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-point jitter in [0, jitter_max], one global per-axis shift in
    [0, global_shift_max], then removal of floor(drop_fraction * N) points."""
    pts = np.asarray(points, dtype=np.float64)
    pts = pts + rng.uniform(0.0, cfg.jitter_max, size=pts.shape)
    pts = pts + rng.uniform(0.0, cfg.global_shift_max, size=(1, 3))
    n_drop = math.floor(cfg.drop_fraction * pts.shape[0])
    if n_drop:
        keep = np.sort(rng.choice(pts.shape[0], pts.shape[0] - n_drop, replace=False))
        pts = pts[keep]
    return pts


# ---- synthetic place generator --------------------------------------------------


def normalize_cloud(points: np.ndarray) -> np.ndarray:
    """Shift to zero mean and scale isotropically into [-1, 1] per axis."""
    pts = np.asarray(points, dtype=np.float64)
    pts = pts - pts.mean(axis=0)
    scale = np.abs(pts).max()
    if scale < 1e-9:
        raise ValueError("degenerate cloud: zero spatial extent")
    return pts / scale


def _sample_place_surface(rng: np.random.Generator, n_points: int) -> np.ndarray:
    """One place: points sampled on the faces of a random arrangement of
    axis-aligned boxes and plane-like slabs."""
    n_prims = int(rng.integers(4, 9))
    centers = rng.uniform(-0.7, 0.7, size=(n_prims, 3))
    halves = rng.uniform(0.08, 0.45, size=(n_prims, 3))
    flat = rng.random(n_prims) < 0.35
    axes = rng.integers(0, 3, size=n_prims)
    for i in np.nonzero(flat)[0]:
        halves[i, axes[i]] = rng.uniform(0.002, 0.01)

    # face areas per box: two faces per axis, area = product of the other halves
    areas = np.empty((n_prims, 3))
    areas[:, 0] = halves[:, 1] * halves[:, 2]
    areas[:, 1] = halves[:, 0] * halves[:, 2]
    areas[:, 2] = halves[:, 0] * halves[:, 1]
    weights = np.repeat(areas, 2, axis=1).reshape(-1)  # (n_prims * 6,)
    weights = weights / weights.sum()

    choice = rng.choice(n_prims * 6, size=n_points, p=weights)
    prim = choice // 6
    face = choice % 6
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)

    u = rng.uniform(-1.0, 1.0, size=(n_points, 3))
    pts = centers[prim] + u * halves[prim]
    rows = np.arange(n_points)
    pts[rows, axis] = centers[prim, axis] + sign * halves[prim, axis]
    return pts


# variant perturbations: a shared per-place master is normalized once and
# variants subsample it (no per-variant renormalization — renormalizing each
# variant shifts its voxel grid globally by the subsample-mean noise, which a
# desk-width network cannot learn to ignore in 50 epochs)
_MASTER_OVERDRAW = 1.25
_MASTER_SCALE = 0.97
_VARIANT_JITTER = 0.002
_VARIANT_SHIFT = 0.006


def generate_synthetic(num_places: int, variants_per_place: int, points_per_cloud: int,
                       rng: np.random.Generator, test_variants: int = 2,
                       region: str = "synthetic") -> list[SubmapRecord]:
    """Desk-scale dataset: distinct places on a 100 m UTM grid, variants of a
    place within a 5 m disc of its centre.

    Each place is a random arrangement of boxes and plane-like slabs; its
    surface-point master pool is normalized to zero mean and [-1, 1] once,
    and variants differ by subsampling the pool plus a small per-point jitter
    and global translation (clouds stay inside [-1, 1] with mean close to
    zero). Cross-place pairs are always negatives (grid spacing 100 m > 50 m)
    and same-place variants always positives (<= 10 m apart). The last
    ``test_variants`` variants of each place form the test split, with one
    retrieval run per variant slot.
    """
    if num_places < 1 or variants_per_place < 1 or points_per_cloud < 12:
        raise ValueError("degenerate synthetic parameters")
    if test_variants < 0 or test_variants >= variants_per_place:
        raise ValueError("degenerate synthetic parameters: need at least one training variant")

    grid_cols = math.ceil(math.sqrt(num_places))
    spacing = 100.0
    records = []
    rec_id = 0
    for place in range(num_places):
        pool = int(_MASTER_OVERDRAW * points_per_cloud)
        master = normalize_cloud(_sample_place_surface(rng, pool)) * _MASTER_SCALE
        center = (spacing * (place // grid_cols), spacing * (place % grid_cols))
        for v in range(variants_per_place):
            idx = rng.choice(master.shape[0], points_per_cloud, replace=False)
            pts = master[idx] + rng.uniform(-_VARIANT_JITTER, _VARIANT_JITTER,
                                            size=(points_per_cloud, 3))
            pts = pts + rng.uniform(-_VARIANT_SHIFT, _VARIANT_SHIFT, size=(1, 3))
            radius = 5.0 * math.sqrt(rng.random())
            theta = rng.uniform(0.0, 2.0 * math.pi)
            utm = (center[0] + radius * math.cos(theta), center[1] + radius * math.sin(theta))
            split = "test" if v >= variants_per_place - test_variants else "train"
            records.append(SubmapRecord(
                id=rec_id, cloud=pts, utm=utm, split=split, region=region,
                run=f"run_{v:02d}",
            ))
            rec_id += 1
    return records
