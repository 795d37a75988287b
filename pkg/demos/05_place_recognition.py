#!/usr/bin/env python3
"""End-to-end miniature: synthesize places, train briefly, evaluate recall.

Runs a deliberately small configuration (16 places, 10 epochs) in about a
minute; the full desk-scale experiment lives in the acceptance suite.
"""

import time
from dataclasses import replace

import numpy as np

from minkunext import generate_synthetic
from minkunext.retrieval import evaluate_protocol
from minkunext.training import preset, train

t0 = time.time()
rng = np.random.default_rng(0)
records = generate_synthetic(num_places=16, variants_per_place=10,
                             points_per_cloud=96, rng=rng)
print(f"dataset: {len(records)} submaps, "
      f"{sum(r.split == 'train' for r in records)} train / "
      f"{sum(r.split == 'test' for r in records)} test")

cfg = replace(preset("desk"), epochs=10, milestones=(6, 8), batch_size=32)
model, history = train(records, cfg,
                       progress=lambda s: print(f"  epoch {s.epoch:2d}  lr {s.lr:.0e}"
                                                f"  loss {s.loss:.4f}"))

report = evaluate_protocol(model, records, cfg.label_config())
print("\n" + report.format_table())
r1, r1p = report.overall()
print(f"\nheld-out AR@1 = {100 * r1:.1f}, AR@1% = {100 * r1p:.1f} "
      f"({time.time() - t0:.0f}s total)")
