"""Command-line surface: synth-gen, train, embed, eval, gradcheck,
oraclecheck, ablate."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import ablations
from .data import LabelConfig, generate_synthetic, load_dataset, write_dataset
from .gradcheck import REL_TOL, run_gradcheck_suite
from .model import build_model
from .reference import dense_conv3d, random_sparse_instance
from .retrieval import embed_dataset, evaluate_protocol, save_descriptor_db
from .training import TrainConfig, load_model, train
from .voxels import CoordinateMap, build_coordinate_map, build_kernel_map, stride_coords


def _cmd_synth_gen(args):
    rng = np.random.default_rng(args.seed)
    records = generate_synthetic(args.places, args.variants, args.points, rng)
    write_dataset(records, args.out)
    n_train = sum(1 for r in records if r.split == "train")
    print(f"wrote {len(records)} submaps ({n_train} train) to {args.out}")


def _cmd_train(args):
    cfg = TrainConfig.from_file(args.config)
    records = load_dataset(args.data)
    log_path = Path(args.out).with_suffix(".metrics.tsv")

    def progress(stats):
        print(f"epoch {stats.epoch:4d}  lr {stats.lr:.2g}  loss {stats.loss:.4f}"
              f"  val_AR@1 {stats.val_recall_at_1:.3f}")

    t0 = time.time()
    train(records, cfg, ckpt_path=args.out, log_path=log_path, progress=progress)
    print(f"finished in {time.time() - t0:.1f}s; checkpoint at {args.out}, "
          f"metrics log at {log_path}")


def _cmd_embed(args):
    model = load_model(args.ckpt)
    records = load_dataset(args.data)
    db = embed_dataset(model, records)
    save_descriptor_db(args.out, db)
    print(f"embedded {len(db)} submaps into {args.out} "
          f"({db.descriptors.shape[1]}-d descriptors)")


def _cmd_eval(args):
    model = load_model(args.ckpt)
    records = load_dataset(args.data)
    report = evaluate_protocol(model, records, LabelConfig())
    print(f"protocol: {args.protocol}")
    print(report.format_table())
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(report.to_delimited())
        print(f"report written to {args.report}")


def _cmd_gradcheck(args):
    results = run_gradcheck_suite(op=args.op, seed=args.seed)
    failed = False
    for name, err in results.items():
        ok = err <= REL_TOL
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name:<24} max rel err {err:.3e}")
    if failed:
        sys.exit(1)


def _cmd_oraclecheck(args):
    from . import ops as _ops

    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for trial in range(args.trials):
        occupancy = rng.uniform(0.1, 0.9)
        coords, feats = random_sparse_instance(rng, args.grid, channels=2, occupancy=occupancy)
        in_map = build_coordinate_map(coords, 1)
        if args.stride == 1:
            out_map = in_map
        else:
            out_map = CoordinateMap(stride_coords(coords, args.stride, 1), args.stride)
        kmap = build_kernel_map(in_map, out_map, args.kernel, args.stride)
        weights = rng.standard_normal((args.kernel**3, 2, 3))
        got, _ = _ops.sparse_conv(feats, weights, None, kmap, len(out_map))
        ref_coords, ref = dense_conv3d(coords, feats, weights, args.kernel, args.stride)
        if not np.array_equal(ref_coords, out_map.coords):
            print(f"FAIL  trial {trial}: output coordinate sets differ")
            sys.exit(1)
        worst = max(worst, float(np.abs(got - ref).max()))
    ok = worst <= 1e-10
    print(f"{'PASS' if ok else 'FAIL'}  {args.trials} trials, grid {args.grid}^3, "
          f"K={args.kernel}, s={args.stride}: max abs err {worst:.3e}")
    if not ok:
        sys.exit(1)


def _cmd_ablate(args):
    cfg = ablations.ablation_config(args.step)
    model = build_model(cfg, seed=0)
    n_params = model.parameter_count()
    print(f"step {args.step}: {len(model.blocks())} residual blocks, "
          f"{cfg.num_skips} skip connections, {n_params} trainable parameters")
    print(json.dumps(cfg.to_dict(), indent=2))

    if args.config:
        tcfg = TrainConfig.from_file(args.config)
        blob = json.loads(Path(args.config).read_text())
        data_dir = blob.get("data_dir")
        if data_dir:
            from dataclasses import replace

            tcfg = replace(tcfg, arch=cfg.scaled(blob.get("channel_divisor", 4)))
            records = load_dataset(data_dir)
            model, _ = train(records, tcfg)
            report = evaluate_protocol(model, records, tcfg.label_config())
            r1, r1p = report.overall()
            print(f"desk-scale recall: AR@1 {100 * r1:.2f}  AR@1% {100 * r1p:.2f}")
        else:
            print("config has no data_dir; skipping the desk-scale recall run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minkunext",
        description="Sparse-convolution place recognition: data generation, "
                    "training, embedding, evaluation and self-checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a synthetic place-recognition dataset")
    p.add_argument("--places", type=int, required=True)
    p.add_argument("--variants", type=int, required=True)
    p.add_argument("--points", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth_gen)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("embed", help="embed a dataset into a descriptor database file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("eval", help="run the AR@1 / AR@1% retrieval protocol")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=("baseline", "refined"), default="baseline")
    p.add_argument("--report", help="write the machine-readable report here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--op", help="check a single op (default: all)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("oraclecheck", help="dense-convolution equivalence suite")
    p.add_argument("--grid", type=int, default=5)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_oraclecheck)

    p = sub.add_parser("ablate", help="build a design-progress variant and report it")
    p.add_argument("--step", required=True, choices=list(ablations.STEPS))
    p.add_argument("--config", help="training config; if it carries a data_dir, "
                                    "also trains desk-scale and reports recall")
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
