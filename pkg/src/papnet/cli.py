"""``papnet`` command line.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from pathlib import Path

from . import __version__
from .augment import build_training_set, materialize, plan_augmentation
from .config import load_config, parse_set, set_path
from .data import SyntheticSpec, dataset_stats, generate_synthetic, load_manifest
from .errors import ConfigError, PapnetError
from .nn.gradcheck import TOLERANCE, run_gradcheck

log = logging.getLogger("papnet")


def _abs(p):
    return str(Path(p).resolve()) if p is not None else None


def _config(args):
    over = parse_set(getattr(args, "set", None))
    for flag, key in (("seed", "seed"), ("channels", "channels"), ("task", "task"), ("k", "folds.k")):
        v = getattr(args, flag, None)
        if v is not None:
            set_path(over, key, v)
    for flag, key in (("manifest", "manifest"), ("out", "out"), ("folds", "folds.path")):
        v = getattr(args, flag, None)
        if v is not None:
            set_path(over, key, _abs(v))
    net = getattr(args, "network", None)
    if net is not None:
        set_path(over, "network", net if not Path(net).suffix else _abs(net))
    if getattr(args, "cell_as_patient", False):
        set_path(over, "cell_as_patient", True)
    return load_config(args.config, over)


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_cells=args.n_cells, image_size=args.image_size, n_classes=args.n_classes, rule=args.rule,
        threshold=args.threshold, cells_per_patient=args.cells_per_patient, seed=args.seed or 0,
    )
    manifest = generate_synthetic(args.out, spec)
    print(f"wrote {len(manifest)} cells and {Path(args.out) / 'manifest.csv'}")
    return 0


def cmd_stats(args) -> int:
    manifest = load_manifest(args.manifest, check_files=False, cell_as_patient=args.cell_as_patient)
    print(dataset_stats(manifest).table())
    return 0


def cmd_ingest(args) -> int:
    cfg = _config(args)
    from .experiment import fold_plan, load_dataset

    manifest, records = load_dataset(cfg)
    shapes = Counter(r.shape for r in records)
    print(f"decoded {len(records)} cells from {cfg.manifest}; image sizes: {dict(shapes.most_common(5))}")
    if args.materialize:
        cells = records
        if args.fold is not None:
            from .split import fold_split

            train_idx, _ = fold_split(fold_plan(cfg, manifest), args.fold, manifest)
            cells = [records[i] for i in train_idx]
        plan = plan_augmentation(Counter(c.class_label for c in cells), cfg.augment)
        index = materialize(build_training_set(cells, plan, cfg.augment), args.materialize)
        print(f"materialized augmented samples, index at {index}")
    return 0


def cmd_split(args) -> int:
    cfg = _config(args)
    from .experiment import fold_plan

    manifest = load_manifest(cfg.manifest, check_files=False, cell_as_patient=cfg.cell_as_patient)
    if cfg.folds_path.exists() and not args.force:
        print(f"fold plan {cfg.folds_path} already exists (use --force to rebuild)")
    elif args.force and cfg.folds_path.exists():
        cfg.folds_path.unlink()
    plan = fold_plan(cfg, manifest)
    sizes = [len(f) for f in plan.fold_cells(manifest)]
    print(f"k={plan.k} seed={plan.seed} fold sizes {sizes} -> {cfg.folds_path}")
    return 0


def _progress(fold, row):
    print(f"fold {fold} epoch {row['epoch']:>3} lr {row['lr']:.2g} loss {row['train_loss']:.4f} "
          f"train_acc {row['train_acc']:.3f} val_acc {row['val_acc']:.3f}", flush=True)


def cmd_train(args) -> int:
    cfg = _config(args)
    from .experiment import fold_plan, load_dataset, run_fold, write_resolved_config

    manifest, records = load_dataset(cfg)
    plan = fold_plan(cfg, manifest)
    out = cfg.out / cfg.run_name
    write_resolved_config(cfg, out)
    run = run_fold(cfg, manifest, records, plan, args.fold, out / f"fold{args.fold}",
                   lambda row: _progress(args.fold, row))
    print(f"best epoch {run.result.best_epoch}; checkpoint {out / f'fold{args.fold}' / 'checkpoint.bin'}")
    print("validation:", {k: v for k, v in run.evaluation.metrics.items()})
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    from .evaluate import EvalReport
    from .experiment import evaluate_checkpoint, fold_plan, load_dataset

    manifest, records = load_dataset(cfg)
    plan = fold_plan(cfg, manifest, create=False)
    ck = Path(args.checkpoint) if args.checkpoint else cfg.out / cfg.run_name / f"fold{args.fold}" / "checkpoint.bin"
    result = evaluate_checkpoint(cfg, ck, records, manifest, plan, args.fold)
    report = EvalReport(cfg.task, cfg.channels, [result], name=cfg.run_name)
    out = report.write(cfg.out / cfg.run_name / f"fold{args.fold}" / "eval")
    print("validation:", result.metrics)
    print(f"report written to {out}")
    return 0


def cmd_crossval(args) -> int:
    cfg = _config(args)
    from .experiment import crossval

    folds = [int(f) for f in args.only.split(",")] if args.only else None
    report = crossval(cfg, folds, None if args.quiet else _progress)
    row = report.summary_row()
    print(" | ".join(f"{k}: {v}" for k, v in row.items()))
    print(f"summary table: {cfg.out / 'summary.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(n_configs=args.configs, seed=args.seed or 0)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.kind:<16} max rel err {r.max_rel_err:.3e}  ({r.configs} configs, {r.seconds:.2f}s)  {status}")
    ok = all(r.passed for r in results)
    print(f"all layer kinds below {TOLERANCE:g}: {ok}")
    return 0 if ok else 4


def _common(p, manifest=True):
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. train.epochs=5")
    if manifest:
        p.add_argument("--manifest")
        p.add_argument("--cell-as-patient", action="store_true",
                       help="treat every cell as its own patient (folds are then NOT patient-level)")
    p.add_argument("--channels", type=int, choices=(3, 5))
    p.add_argument("--task", choices=("2class", "7class"))
    p.add_argument("--network", help="preset name or NetworkSpec JSON path")
    p.add_argument("--folds", help="fold plan JSON path")
    p.add_argument("--k", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="papnet", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cell dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-cells", type=int, default=100)
    p.add_argument("--image-size", type=int, default=48)
    p.add_argument("--n-classes", type=int, default=2)
    p.add_argument("--rule", choices=("ratio", "ratio+darkness"), default="ratio")
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--cells-per-patient", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="per-class / per-category / per-patient counts")
    p.add_argument("manifest")
    p.add_argument("--cell-as-patient", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("ingest", help="decode and validate every cell")
    _common(p)
    p.add_argument("--materialize", metavar="DIR", help="export augmented samples as raw float32 files")
    p.add_argument("--fold", type=int, help="with --materialize: export only this fold's training stream")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="build and persist the patient-level fold plan")
    _common(p)
    p.add_argument("--force", action="store_true", help="rebuild an existing plan")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one fold")
    _common(p)
    p.add_argument("--fold", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a fold checkpoint with test-time aggregation")
    _common(p)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", help="split, augment, train and evaluate every fold")
    _common(p)
    p.add_argument("--only", help="comma-separated subset of folds")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer kind")
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PapnetError as exc:
        print(f"papnet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, KeyError) as exc:
        # contract violations surfaced from library code are reported as config errors
        print(f"papnet {args.command}: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
