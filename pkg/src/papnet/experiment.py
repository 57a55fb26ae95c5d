"""End-to-end orchestration: split, per-fold augmentation, training, evaluation."""
from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augment import build_eval_set, build_training_set, plan_augmentation
from .config import ExperimentConfig
from .data import CellRecord, DatasetManifest, decode_all, load_manifest
from .errors import ConfigError
from .evaluate import EvalReport, FoldResult, evaluate_cells
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.network import Network, build_network, init_weights
from .split import FoldPlan, audit_leakage, fold_split, make_folds
from .train import TrainResult, train, write_history

log = logging.getLogger(__name__)


def load_dataset(cfg: ExperimentConfig) -> tuple[DatasetManifest, list[CellRecord]]:
    if cfg.manifest is None:
        raise ConfigError("manifest: no manifest path configured")
    manifest = load_manifest(cfg.manifest, cell_as_patient=cfg.cell_as_patient)
    return manifest, decode_all(manifest, cfg.colors, workers=cfg.workers)


def fold_plan(cfg: ExperimentConfig, manifest: DatasetManifest, create: bool = True) -> FoldPlan:
    """Reuse the persisted plan so that runs with different inputs share folds."""
    path = cfg.folds_path
    if path.is_file():
        plan = FoldPlan.load(path)
        missing = {e.patient_id for e in manifest} - set(plan.assignment)
        if missing:
            raise ConfigError(f"fold plan {path} lacks patients {sorted(missing)[:5]}")
        return plan
    if not create:
        raise ConfigError(f"fold plan {path} does not exist; run `papnet split` first")
    plan = make_folds(manifest, cfg.k, cfg.fold_seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    plan.save(path)
    return plan


@dataclass
class FoldRun:
    fold: int
    net: Network
    result: TrainResult
    evaluation: FoldResult


def run_fold(cfg: ExperimentConfig, manifest: DatasetManifest, records: Sequence[CellRecord],
             plan: FoldPlan, fold: int, out_dir: Path | None = None,
             progress: Callable[[dict], None] | None = None) -> FoldRun:
    train_idx, val_idx = fold_split(plan, fold, manifest)
    train_cells = [records[i] for i in train_idx]
    val_cells = [records[i] for i in val_idx]
    # augmentation is planned on the training side only, after the split
    aug_plan = plan_augmentation(Counter(c.class_label for c in train_cells), cfg.augment)
    train_set = build_training_set(train_cells, aug_plan, cfg.augment)
    val_set = build_eval_set(val_cells, cfg.augment)
    leak = audit_leakage(plan, train_set, val_set)
    if not leak.ok:
        raise ConfigError(f"fold {fold}: {leak}")

    net = build_network(cfg.network_spec())
    init_weights(net, cfg.init, np.random.default_rng([cfg.seed, fold]))
    result = train(net, train_set, val_set, cfg.train, channels=cfg.channels, task=cfg.task, progress=progress)
    net.set_parameters(result.best_params)
    evaluation = evaluate_cells(net, val_cells, cfg.task, cfg.tta, cfg.augment, cfg.train.crop,
                                result.channel_means, fold)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_history(result.history, out_dir / "history.csv")
        save_checkpoint(out_dir / "checkpoint.bin", net, checkpoint_metadata(cfg, fold, result), result.velocity)
    return FoldRun(fold, net, result, evaluation)


def checkpoint_metadata(cfg: ExperimentConfig, fold: int, result: TrainResult) -> dict:
    return {
        "fold": fold,
        "best_epoch": result.best_epoch,
        "task": cfg.task,
        "channels": cfg.channels,
        "channel_means": [float(m) for m in result.channel_means],
        "crop": cfg.train.crop,
        "augment": cfg.raw["augment"],
        "tta": cfg.raw["tta"],
    }


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint: Path, records: Sequence[CellRecord],
                        manifest: DatasetManifest, plan: FoldPlan, fold: int) -> FoldResult:
    ck = load_checkpoint(checkpoint)
    meta = ck.metadata
    if meta.get("channels") != cfg.channels or meta.get("task") != cfg.task:
        raise ConfigError(
            f"checkpoint was trained for {meta.get('channels')}C/{meta.get('task')}, config asks {cfg.channels}C/{cfg.task}"
        )
    _, val_idx = fold_split(plan, fold, manifest)
    return evaluate_cells(ck.network, [records[i] for i in val_idx], cfg.task, cfg.tta, cfg.augment,
                          int(meta["crop"]), np.asarray(meta["channel_means"], np.float32), fold)


def write_resolved_config(cfg: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")


def update_summary(summary_path: Path, row: dict[str, str]) -> None:
    """Insert or replace this run's row in a shared summary table."""
    rows: list[dict[str, str]] = []
    if summary_path.is_file():
        with summary_path.open(newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if r.get("model") != row["model"]]
    rows.append(row)
    fields: list[str] = []
    for r in rows:
        fields.extend(k for k in r if k not in fields)
    with summary_path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n", restval="")
        w.writeheader()
        w.writerows(sorted(rows, key=lambda r: r["model"]))


def crossval(cfg: ExperimentConfig, folds: Sequence[int] | None = None,
             progress: Callable[[int, dict], None] | None = None) -> EvalReport:
    manifest, records = load_dataset(cfg)
    plan = fold_plan(cfg, manifest)
    run_dir = cfg.out / cfg.run_name
    write_resolved_config(cfg, run_dir)
    results = []
    for fold in folds if folds is not None else range(plan.k):
        cb = (lambda row, f=fold: progress(f, row)) if progress else None
        run = run_fold(cfg, manifest, records, plan, fold, run_dir / f"fold{fold}", cb)
        results.append(run.evaluation)
    report = EvalReport(cfg.task, cfg.channels, results, name=cfg.run_name)
    report.write(run_dir)
    update_summary(cfg.out / "summary.csv", report.summary_row())
    return report
