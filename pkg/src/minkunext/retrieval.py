"""Descriptor databases, exhaustive retrieval, and the AR@1 / AR@1% protocol.

Retrieval is an exhaustive Euclidean scan with ties broken by record id.
A query counts as solved at rank N if any of its top-N retrieved entries
lies within the success radius of the query's UTM position; queries with no
correct answer anywhere in the database are excluded from the denominator.
The protocol iterates, per region, over ordered (database run, query run)
pairs and averages.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabelConfig, SubmapRecord

DB_MAGIC = b"MUXTDB01"
DB_VERSION = 1


@dataclass
class DescriptorDB:
    descriptors: np.ndarray  # (M, D) float32
    utm: np.ndarray  # (M, 2) float64
    ids: np.ndarray  # (M,) int64
    regions: list[str] = field(default_factory=list)
    runs: list[str] = field(default_factory=list)

    def __post_init__(self):
        m = self.descriptors.shape[0]
        if self.utm.shape != (m, 2) or self.ids.shape != (m,):
            raise ValueError("row counts disagree across DescriptorDB fields")

    def __len__(self):
        return self.descriptors.shape[0]

    def subset(self, mask) -> "DescriptorDB":
        idx = np.nonzero(mask)[0]
        return DescriptorDB(
            descriptors=self.descriptors[idx],
            utm=self.utm[idx],
            ids=self.ids[idx],
            regions=[self.regions[i] for i in idx] if self.regions else [],
            runs=[self.runs[i] for i in idx] if self.runs else [],
        )


def save_descriptor_db(path, db: DescriptorDB):
    """Binary layout: magic, u32 version, u32 M, u32 D, then M*D f32 LE
    descriptors, M*2 f64 LE UTM pairs, and M u64 LE record ids."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m, d = db.descriptors.shape
    with open(path, "wb") as fh:
        fh.write(DB_MAGIC)
        fh.write(struct.pack("<III", DB_VERSION, m, d))
        fh.write(np.ascontiguousarray(db.descriptors, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(db.utm, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(db.ids, dtype="<u8").tobytes())


def load_descriptor_db(path) -> DescriptorDB:
    raw = Path(path).read_bytes()
    if raw[:8] != DB_MAGIC:
        raise ValueError("not a descriptor database (bad magic)")
    version, m, d = struct.unpack("<III", raw[8:20])
    if version != DB_VERSION:
        raise ValueError(f"unsupported descriptor db version {version}")
    off = 20
    desc = np.frombuffer(raw, dtype="<f4", count=m * d, offset=off).reshape(m, d).copy()
    off += 4 * m * d
    utm = np.frombuffer(raw, dtype="<f8", count=2 * m, offset=off).reshape(m, 2).copy()
    off += 16 * m
    ids = np.frombuffer(raw, dtype="<u8", count=m, offset=off).astype(np.int64)
    return DescriptorDB(descriptors=desc, utm=utm, ids=ids)


def embed_dataset(model, records: list[SubmapRecord], batch_size: int = 32) -> DescriptorDB:
    """Eval-mode descriptors for every record, rows ordered by record id."""
    if not records:
        raise ValueError("empty record list")
    ordered = sorted(records, key=lambda r: r.id)
    rows = []
    for i in range(0, len(ordered), batch_size):
        chunk = ordered[i:i + batch_size]
        rows.append(model.embed([r.cloud for r in chunk]))
    return DescriptorDB(
        descriptors=np.concatenate(rows, axis=0).astype(np.float32),
        utm=np.array([r.utm for r in ordered], dtype=np.float64),
        ids=np.array([r.id for r in ordered], dtype=np.int64),
        regions=[r.region for r in ordered],
        runs=[r.run for r in ordered],
    )


def retrieve(query_descriptor: np.ndarray, db: DescriptorDB, top_n: int) -> np.ndarray:
    """ids of the top_n nearest database entries (distance asc, ties by id)."""
    if len(db) == 0:
        raise ValueError("empty database")
    diff = db.descriptors.astype(np.float64) - np.asarray(query_descriptor, dtype=np.float64)
    # squared distance orders identically to Euclidean and keeps ties exact
    d2 = (diff * diff).sum(axis=1)
    order = np.lexsort((db.ids, d2))
    return db.ids[order[:top_n]]


def _ranked_rows(db: DescriptorDB, queries: DescriptorDB) -> np.ndarray:
    """(Q, M) matrix of database row indices ranked per query."""
    qd = queries.descriptors.astype(np.float64)
    dd = db.descriptors.astype(np.float64)
    d2 = ((qd[:, None, :] - dd[None, :, :]) ** 2).sum(axis=2)
    # lexsort per row: distance first, db id as tiebreak
    order = np.lexsort((np.broadcast_to(db.ids, d2.shape), d2), axis=1)
    return order


def recall_at(db: DescriptorDB, queries: DescriptorDB, n: int, cfg: LabelConfig) -> float:
    """Fraction of queries with a correct entry among the top-N retrieved.

    Correct means within ``cfg.success_radius`` of the query UTM. Queries
    without any correct answer in the database are excluded.
    """
    if len(db) == 0:
        raise ValueError("empty database")
    if n < 1:
        raise ValueError("N must be >= 1")
    order = _ranked_rows(db, queries)
    udiff = queries.utm[:, None, :] - db.utm[None, :, :]
    within = (udiff * udiff).sum(axis=2) <= cfg.success_radius**2
    eligible = within.any(axis=1)
    if not eligible.any():
        return float("nan")
    top = order[:, :n]
    hit = np.take_along_axis(within, top, axis=1).any(axis=1)
    return float(hit[eligible].mean())


def one_percent_cutoff(db_size: int) -> int:
    """N = max(1, round(M / 100)) with half-up rounding."""
    return max(1, int(np.floor(db_size / 100.0 + 0.5)))


def recall_at_one_percent(db: DescriptorDB, queries: DescriptorDB, cfg: LabelConfig) -> float:
    return recall_at(db, queries, one_percent_cutoff(len(db)), cfg)


@dataclass
class RecallReport:
    """Per run-pair recalls plus per-region and overall averages."""

    pairs: list[tuple[str, str, str, float, float]] = field(default_factory=list)
    # rows: (region, db_run, query_run, recall@1, recall@1%)

    def add(self, region, db_run, query_run, r1, r1p):
        self.pairs.append((region, db_run, query_run, r1, r1p))

    def region_means(self) -> dict[str, tuple[float, float]]:
        acc: dict[str, list[tuple[float, float]]] = {}
        for region, _, _, r1, r1p in self.pairs:
            acc.setdefault(region, []).append((r1, r1p))
        return {
            region: (
                float(np.nanmean([v[0] for v in vals])),
                float(np.nanmean([v[1] for v in vals])),
            )
            for region, vals in acc.items()
        }

    def overall(self) -> tuple[float, float]:
        means = self.region_means()
        if not means:
            return float("nan"), float("nan")
        r1 = float(np.mean([v[0] for v in means.values()]))
        r1p = float(np.mean([v[1] for v in means.values()]))
        return r1, r1p

    def format_table(self) -> str:
        lines = [f"{'region':<12} {'AR@1':>8} {'AR@1%':>8}"]
        for region, (r1, r1p) in sorted(self.region_means().items()):
            lines.append(f"{region:<12} {100 * r1:8.2f} {100 * r1p:8.2f}")
        r1, r1p = self.overall()
        lines.append(f"{'mean':<12} {100 * r1:8.2f} {100 * r1p:8.2f}")
        return "\n".join(lines)

    def to_delimited(self) -> str:
        lines = ["region\tdb_run\tquery_run\trecall_at_1\trecall_at_1pct"]
        for region, db_run, query_run, r1, r1p in self.pairs:
            lines.append(f"{region}\t{db_run}\t{query_run}\t{r1:.6f}\t{r1p:.6f}")
        for region, (r1, r1p) in sorted(self.region_means().items()):
            lines.append(f"{region}\t*\t*\t{r1:.6f}\t{r1p:.6f}")
        r1, r1p = self.overall()
        lines.append(f"mean\t*\t*\t{r1:.6f}\t{r1p:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_db(db: DescriptorDB, cfg: LabelConfig) -> RecallReport:
    """AR over ordered run pairs within each region of an embedded test set."""
    report = RecallReport()
    regions = sorted(set(db.regions))
    for region in regions:
        region_mask = np.array([r == region for r in db.regions])
        region_db = db.subset(region_mask)
        runs = sorted(set(region_db.runs))
        if len(runs) < 2:
            continue
        for db_run in runs:
            base = region_db.subset(np.array([r == db_run for r in region_db.runs]))
            for query_run in runs:
                if query_run == db_run:
                    continue
                qs = region_db.subset(np.array([r == query_run for r in region_db.runs]))
                r1 = recall_at(base, qs, 1, cfg)
                r1p = recall_at_one_percent(base, qs, cfg)
                report.add(region, db_run, query_run, r1, r1p)
    return report


def evaluate_protocol(model, records: list[SubmapRecord], cfg: LabelConfig,
                      split: str = "test") -> RecallReport:
    """Embed the chosen split and run the ordered-run-pair recall protocol."""
    chosen = [r for r in records if r.split == split]
    if not chosen:
        raise ValueError(f"no records in split {split!r}")
    db = embed_dataset(model, chosen)
    return evaluate_db(db, cfg)
