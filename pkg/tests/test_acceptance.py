"""Acceptance criteria, one test per criterion, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -v -s``. Criterion 6 trains the
desk-scale model for three seeds and dominates the runtime (around half an
hour on a small CPU); everything else completes in a few minutes.
"""

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from minkunext import ablations, ops
from minkunext.autodiff import lr_at
from minkunext.data import LabelConfig, generate_synthetic
from minkunext.gradcheck import REL_TOL, run_gradcheck_suite
from minkunext.loss import LossConfig, tsap_loss
from minkunext.model import ArchConfig, build_model
from minkunext.reference import dense_conv3d, random_sparse_instance
from minkunext.retrieval import evaluate_protocol, recall_at, recall_at_one_percent
from minkunext.training import TrainConfig, preset, train
from minkunext.voxels import CoordinateMap, build_coordinate_map, build_kernel_map, stride_coords

from test_retrieval import _db, recall_oracle

ROOT = Path(__file__).resolve().parents[1]


def _line(num, ok, text):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num}: {text}")
    assert ok, f"criterion {num}: {text}"


def test_criterion_1_dense_oracle_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.time()
    worst64 = 0.0
    worst32 = 0.0
    for trial in range(200):
        grid = int(rng.integers(3, 8))
        kernel = int(rng.choice([1, 2, 3, 5]))
        stride = int(rng.choice([1, 2]))
        occupancy = float(rng.uniform(0.1, 0.9))
        coords, feats = random_sparse_instance(rng, grid, channels=2, occupancy=occupancy)
        in_map = build_coordinate_map(coords, 1)
        if stride == 1:
            out_map = in_map
        else:
            out_map = CoordinateMap(stride_coords(coords, 2, 1), tensor_stride=2)
        kmap = build_kernel_map(in_map, out_map, kernel, stride)
        # fan-in scaling keeps outputs O(1) so the absolute tolerances bite
        weights = rng.standard_normal((kernel**3, 2, 3)) / np.sqrt(kernel**3 * 2)
        ref_coords, ref = dense_conv3d(coords, feats, weights, kernel, stride)
        assert np.array_equal(ref_coords, out_map.coords)

        got64, _ = ops.sparse_conv(feats, weights, None, kmap, len(out_map))
        worst64 = max(worst64, float(np.abs(got64 - ref).max()))
        got32, _ = ops.sparse_conv(feats.astype(np.float32), weights.astype(np.float32),
                                   None, kmap, len(out_map))
        worst32 = max(worst32, float(np.abs(got32 - ref).max()))
    elapsed = time.time() - t0
    _line(1, worst64 <= 1e-10 and worst32 <= 1e-5 and elapsed < 60,
          f"200 randomized trials: max err {worst64:.2e} (double, tol 1e-10), "
          f"{worst32:.2e} (single, tol 1e-5), {elapsed:.1f}s (< 60s)")


def test_criterion_2_gradient_suite():
    t0 = time.time()
    results = run_gradcheck_suite()
    elapsed = time.time() - t0
    worst = max(results.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in sorted(results.items(), key=lambda kv: -kv[1])[:3])
    _line(2, worst <= REL_TOL and elapsed < 300,
          f"{len(results)} checks incl. end-to-end model and tsap_loss, "
          f"max rel err {worst:.2e} <= 1e-4 (worst: {detail}), {elapsed:.1f}s (< 5 min)")


def test_criterion_3_loss_identities():
    cfg = LossConfig(tau=0.01, k=4, batch_size=4)

    desc = np.array([[0.0, 0.0], [1.0, 0.0]])
    pos = np.zeros((2, 2), bool)
    neg = np.zeros((2, 2), bool)
    pos[0, 1] = True
    loss_single, _, _ = tsap_loss(desc, pos, neg, LossConfig(tau=0.01, k=4, batch_size=2))

    desc = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    pos = np.zeros((3, 3), bool)
    neg = np.zeros((3, 3), bool)
    pos[0, 1] = True
    neg[0, 2] = True
    loss_tied, _, _ = tsap_loss(desc, pos, neg, LossConfig(tau=0.01, k=4, batch_size=3))

    rng = np.random.default_rng(7)
    mono_ok = True
    cfg100 = LossConfig(tau=0.2, k=2, batch_size=6)
    for _ in range(100):
        d = rng.standard_normal((6, 3))
        pos = np.zeros((6, 6), bool)
        neg = np.zeros((6, 6), bool)
        pos[0, 1] = pos[0, 2] = True
        neg[0, 3] = neg[0, 4] = neg[0, 5] = True
        base, _, _ = tsap_loss(d, pos, neg, cfg100)
        moved = d.copy()
        moved[3] = d[0] + float(rng.uniform(1.1, 3.0)) * (d[3] - d[0])
        farther, _, _ = tsap_loss(moved, pos, neg, cfg100)
        mono_ok &= farther <= base + 1e-12

    _line(3, loss_single == 0.0 and abs(loss_tied - 1.0 / 3.0) <= 1e-12 and mono_ok,
          f"single-positive loss = {loss_single} (exact 0), tied pair loss - 1/3 = "
          f"{loss_tied - 1/3:.1e} (tol 1e-12), monotone on 100 random instances: {mono_ok}")


def test_criterion_4_architecture_conformance():
    cfg = ArchConfig()
    model = build_model(cfg, seed=0)
    rng = np.random.default_rng(0)
    desc = model.embed([rng.uniform(-1, 1, (60, 3))])
    blocks = model.blocks()
    structure_ok = (
        desc.shape == (1, 512)
        and len(blocks) == 7
        and len(model.decoder) == 3
        and all(b.hidden == 4 * b.c_out for b in blocks)
    )

    counts = {"START": build_model(ablations.START, seed=0).parameter_count()}
    configs = {}
    for step in ablations.STEPS:
        configs[step] = ablations.ablation_config(step)
        counts[step] = build_model(configs[step], seed=0).parameter_count()
    distinct = all(
        a == b or configs[a] != configs[b] for a in configs for b in configs
    )
    directions_ok = True
    for step, (base, direction) in ablations.PARAM_DIRECTION.items():
        if direction == "down":
            directions_ok &= counts[step] < counts[base]
        elif direction == "up":
            directions_ok &= counts[step] > counts[base]
        else:
            directions_ok &= counts[step] == counts[base]

    _line(4, structure_ok and distinct and directions_ok,
          f"512-d descriptor, 7 residual blocks, 3 skip fusions, hidden = 4x output; "
          f"{len(configs)} design-progress variants buildable, pairwise distinct, "
          f"parameter-count directions all as expected")


def test_criterion_5_determinism_and_invariance():
    tiny = ArchConfig(encoder_channels=(2, 2, 3, 3), decoder_channels=(3, 2),
                      num_skips=2, cardinalities=(1,) * 6, stem_kernel=3, fc_dim=8)
    model = build_model(tiny, seed=0, quantization_scale=0.1)
    rng = np.random.default_rng(1)
    cloud = rng.uniform(-1, 1, (80, 3))
    other = rng.uniform(-1, 1, (80, 3))

    perm_ok = np.array_equal(
        model.embed([cloud]), model.embed([cloud[rng.permutation(80)]])
    )
    alone = model.embed([cloud])[0]
    batched = model.embed([other, cloud, other])[1]
    batch_ok = np.array_equal(alone, batched)

    records = generate_synthetic(4, 6, 48, np.random.default_rng(5), test_variants=2)
    cfg = TrainConfig(protocol="desk", epochs=1, milestones=(), batch_size=8,
                      quantization_scale=0.1, seed=11, val_interval=0,
                      train_regions=None, arch=tiny)
    _, h1 = train(records, cfg)
    _, h2 = train(records, cfg)
    seed_ok = h1[0].loss == h2[0].loss

    _line(5, perm_ok and batch_ok and seed_ok,
          f"point-permutation bitwise: {perm_ok}, batch-composition bitwise: {batch_ok}, "
          f"seed-reproducible epoch-1 loss: {h1[0].loss:.6f} == {h2[0].loss:.6f}")


def test_criterion_6_desk_scale_retrieval():
    results = []
    for seed in (0, 1, 2):
        t0 = time.time()
        rng = np.random.default_rng(seed)
        records = generate_synthetic(64, 10, 128, rng, test_variants=2)
        cfg = replace(preset("desk"), seed=seed)
        assert cfg.arch.encoder_channels == (8, 16, 32, 64)
        assert cfg.batch_size == 64 and cfg.tau == 0.01
        assert cfg.positives_per_query == 4 and cfg.epochs == 50
        model, _ = train(records, cfg)
        r1, r1p = evaluate_protocol(model, records, cfg.label_config()).overall()
        minutes = (time.time() - t0) / 60
        ok = r1 >= 0.90 and r1p >= 0.95 and minutes <= 20
        results.append((seed, r1, r1p, minutes, ok))
        print(f"\n  seed {seed}: AR@1 {r1:.3f} AR@1% {r1p:.3f} "
              f"{minutes:.1f} min -> {'pass' if ok else 'fail'}")
    passes = sum(1 for r in results if r[4])
    detail = "; ".join(f"seed {s}: AR@1 {a:.3f}, AR@1% {b:.3f}, {m:.1f} min"
                       for s, a, b, m, _ in results)
    _line(6, passes >= 2,
          f"64 places x 10 variants (8 train / 2 test), batch 64, tau 0.01, k 4, "
          f"50 epochs: {passes}/3 seeds reach AR@1 >= 0.90 and AR@1% >= 0.95 "
          f"within 20 min ({detail})")


def test_criterion_7_full_scale_configs_structurally_valid():
    # full-scale benchmark numbers are intentionally not reproduced here (the
    # real datasets and a batch size of 2048 are far beyond desk scale); the
    # shipped protocol configs are validated structurally instead
    expectations = {
        "baseline": (400, (250, 350)),
        "refined": (500, (350, 450)),
    }
    ok = True
    details = []
    for name, (epochs, milestones) in expectations.items():
        cfg = TrainConfig.from_file(ROOT / "configs" / f"{name}.json")
        ok &= cfg.batch_size == 2048 and cfg.epochs == epochs
        ok &= cfg.milestones == milestones
        ok &= cfg.initial_lr == 1e-3 and cfg.weight_decay == 1e-4
        ok &= cfg.tau == 0.01 and cfg.positives_per_query == 4
        ok &= cfg.quantization_scale == 0.01
        # the logged LR sequence is the schedule: divided by 10 at each step
        seq = [lr_at(cfg.schedule(), e) for e in range(cfg.epochs)]
        m0, m1 = milestones
        ok &= seq[:m0] == [1e-3] * m0
        ok &= np.allclose(seq[m0:m1], 1e-4) and np.allclose(seq[m1:], 1e-5)
        ok &= len(set(np.round(seq, 12))) == 3
        details.append(f"{name}: batch 2048, {epochs} epochs, LR 1e-3 / steps {milestones}")
    _line(7, ok, "full-scale protocol configs shipped and schedule-checked "
                 f"({'; '.join(details)}); benchmark recalls not claimed at desk scale")


def test_criterion_8_recall_matches_bruteforce_oracle():
    rng = np.random.default_rng(99)
    cfg = LabelConfig()
    exact = 0
    for _ in range(50):
        m = int(rng.integers(3, 30))
        qn = int(rng.integers(2, 12))
        d = int(rng.integers(1, 6))
        db = _db(rng.standard_normal((m, d)), utm=rng.uniform(0, 90, (m, 2)),
                 ids=rng.permutation(m))
        queries = _db(rng.standard_normal((qn, d)), utm=rng.uniform(0, 90, (qn, 2)))
        n = int(rng.integers(1, m + 1))
        got_n = recall_at(db, queries, n, cfg)
        want_n = recall_oracle(db, queries, n, cfg.success_radius)
        got_pct = recall_at_one_percent(db, queries, cfg)
        want_pct = recall_oracle(db, queries, max(1, round(m / 100)), cfg.success_radius)
        same = (got_n == want_n or (np.isnan(got_n) and np.isnan(want_n)))
        same &= (got_pct == want_pct or (np.isnan(got_pct) and np.isnan(want_pct)))
        exact += bool(same)
    _line(8, exact == 50,
          f"recall_at and recall_at_one_percent agree exactly with the "
          f"double-loop oracle on {exact}/50 randomized databases")
