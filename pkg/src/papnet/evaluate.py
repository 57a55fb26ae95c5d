"""Test-time aggregation, classification metrics and fold reports.

The positive class of every binary metric is *abnormal*; its score is
P(abnormal). Metrics that a fold cannot define (a class absent from it) are
``None``, never 0.
"""
from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .augment import (
    AugmentConfig,
    Provenance,
    center_crop,
    jitter_center,
    normalize,
    render,
)
from .data import CellRecord
from .errors import ConfigError
from .nn.network import Network, softmax
from .train import target_index


@dataclass(frozen=True)
class TTAConfig:
    """Random translated views per cell times crops per view, softmax-averaged.

    ``d`` is the view jitter; ``None`` uses the augmentation's max offset.
    ``n_crops`` is 1 (center) or 10 (center + 4 corners, each also mirrored).
    """

    n_random_views: int = 10
    n_crops: int = 10
    d: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_random_views < 1:
            raise ConfigError("tta.n_random_views must be >= 1")
        if self.n_crops not in (1, 10):
            raise ConfigError("tta.n_crops must be 1 or 10")


def ten_crops(tensor: np.ndarray, crop: int) -> np.ndarray:
    h, w = tensor.shape[:2]
    corners = [(0, 0), (0, w - crop), (h - crop, 0), (h - crop, w - crop)]
    views = [center_crop(tensor, crop)] + [tensor[r : r + crop, c : c + crop] for r, c in corners]
    views += [v[:, ::-1] for v in views]
    return np.stack(views)


def tta_views(cell: CellRecord, tta: TTAConfig, aug: AugmentConfig, crop: int, channels: int) -> np.ndarray:
    """All (views x crops) network inputs for one cell, before normalization."""
    d = aug.d if tta.d is None else tta.d
    out = []
    for v in range(tta.n_random_views):
        rng = np.random.default_rng([tta.seed, cell.index, v])
        jitter = jitter_center((0, 0), d, rng)
        t = render(cell, Provenance(cell.index, cell.patient_id, 0.0, jitter), aug)[..., :channels]
        out.append(ten_crops(t, crop) if tta.n_crops == 10 else center_crop(t, crop)[None])
    return np.concatenate(out)


def predict_cell(net: Network, cell: CellRecord, tta: TTAConfig, aug: AugmentConfig, crop: int,
                 means: Sequence[float]) -> np.ndarray:
    """Mean softmax over every TTA view of ``cell``."""
    means = np.asarray(means, np.float32)
    if means.shape != (net.channels,):
        raise ConfigError(f"network takes {net.channels} channels, got {means.shape[0]} channel means")
    x = normalize(tta_views(cell, tta, aug, crop, net.channels), means)
    return softmax(net.forward(x)).mean(axis=0)


def predict_cells(net, cells, tta, aug, crop, means) -> np.ndarray:
    if not cells:
        return np.zeros((0, net.n_classes))
    return np.stack([predict_cell(net, c, tta, aug, crop, means) for c in cells])


# ---------------------------------------------------------------------------
# Metrics


@dataclass(frozen=True)
class BinaryMetrics:
    sens: float | None
    spec: float | None
    acc: float
    tp: int
    fn: int
    tn: int
    fp: int


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def binary_metrics(scores, labels, threshold: float = 0.5) -> BinaryMetrics:
    """Abnormal is predicted when score > threshold (ties go to normal, like argmax)."""
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.size == 0:
        raise ValueError("binary_metrics on empty input")
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pred = scores > threshold
    tp = int(np.sum(pred & labels))
    fn = int(np.sum(~pred & labels))
    tn = int(np.sum(~pred & ~labels))
    fp = int(np.sum(pred & ~labels))
    return BinaryMetrics(_ratio(tp, tp + fn), _ratio(tn, tn + fp), (tp + tn) / scores.size, tp, fn, tn, fp)


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


def roc_auc(scores, labels) -> tuple[RocCurve, float]:
    """ROC over every distinct threshold (plus +/-inf) and its trapezoid area.

    Tied scores move the curve diagonally, so the area equals the Mann-Whitney
    probability P(s_abnormal > s_normal) + P(equal) / 2.
    """
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last_of_run = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[last_of_run]
    fp = np.cumsum(~y)[last_of_run]
    tpr = np.r_[0.0, tp / n_pos, 1.0]
    fpr = np.r_[0.0, fp / n_neg, 1.0]
    thresholds = np.r_[np.inf, s[last_of_run], -np.inf]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr, tpr, thresholds), auc


def argmax_class(probs: np.ndarray) -> np.ndarray:
    """Row argmax; ties go to the lowest class index."""
    return np.asarray(probs).argmax(axis=1)


def confusion(preds, labels, n: int) -> np.ndarray:
    """n x n counts, rows true class, columns predicted."""
    preds = np.asarray(preds, np.int64)
    labels = np.asarray(labels, np.int64)
    for name, a in (("prediction", preds), ("label", labels)):
        if a.size and (a.min() < 0 or a.max() >= n):
            raise ValueError(f"{name} outside [0, {n})")
    cm = np.zeros((n, n), np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def average_accuracy(cm) -> float:
    """Mean of the row-normalised diagonal (mean per-class recall)."""
    cm = np.asarray(cm, np.float64)
    rows = cm.sum(axis=1)
    if np.any(rows == 0):
        raise ValueError("average_accuracy: confusion matrix has an empty row")
    return float(np.mean(np.diag(cm) / rows))


@dataclass(frozen=True)
class Aggregate:
    mean: float | None
    std: float | None
    n: int
    undefined_folds: tuple[int, ...] = ()

    def format(self, percent: bool = False, digits: int | None = None) -> str:
        if self.mean is None:
            return "n/a"
        scale = 100.0 if percent else 1.0
        digits = digits if digits is not None else (1 if percent else 3)
        text = f"{self.mean * scale:.{digits}f}"
        if self.std is not None:
            text += f" ± {self.std * scale:.{digits}f}"
        if self.undefined_folds:
            text += "*"
        return text


def aggregate_folds(per_fold: Sequence[Mapping[str, float | None]]) -> dict[str, Aggregate]:
    """Mean and sample std per metric over folds.

    Undefined (``None``) values are left out of the statistics and the folds
    they came from are listed; with fewer than two defined values std is None.
    """
    keys = []
    for fold in per_fold:
        keys.extend(k for k in fold if k not in keys)
    out = {}
    for k in keys:
        vals = [f.get(k) for f in per_fold]
        undefined = tuple(i for i, v in enumerate(vals) if v is None or (isinstance(v, float) and math.isnan(v)))
        # statistics works in exact rationals, so identical folds give std 0
        defined = [float(v) for i, v in enumerate(vals) if i not in undefined]
        mean = statistics.mean(defined) if defined else None
        std = statistics.stdev(defined) if len(defined) >= 2 else None
        out[k] = Aggregate(mean, std, len(defined), undefined)
    return out


# ---------------------------------------------------------------------------
# Fold evaluation and reports


@dataclass
class FoldResult:
    fold: int
    task: str
    metrics: dict[str, float | None]
    confusion: np.ndarray
    roc: RocCurve | None
    probs: np.ndarray
    targets: np.ndarray
    cell_indices: list[int]

    def to_json(self) -> dict:
        doc = {
            "fold": self.fold,
            "metrics": self.metrics,
            "confusion": self.confusion.tolist(),
            "cells": self.cell_indices,
            "targets": self.targets.tolist(),
            "probs": [[float(p) for p in row] for row in self.probs],
        }
        if self.roc is not None:
            doc["roc"] = {"fpr": self.roc.fpr.tolist(), "tpr": self.roc.tpr.tolist(),
                          "threshold": [_finite_or_str(t) for t in self.roc.thresholds]}
        return doc


def _finite_or_str(t: float):
    return float(t) if math.isfinite(t) else ("inf" if t > 0 else "-inf")


def fold_metrics(probs: np.ndarray, class_labels, task: str, fold: int = 0,
                 cell_indices: Sequence[int] = ()) -> FoldResult:
    targets = target_index(class_labels, task)
    n = probs.shape[1]
    preds = argmax_class(probs)
    cm = confusion(preds, targets, n)
    abnormal_score = probs[:, 1] if task == "2class" else probs[:, 3:].sum(axis=1)
    abnormal = ~np.isin(np.asarray(class_labels), [1, 2, 3])
    bm = binary_metrics(abnormal_score, abnormal) if task == "2class" else None
    metrics: dict[str, float | None] = {"acc": float(np.trace(cm) / cm.sum())}
    roc = None
    try:
        roc, auc = roc_auc(abnormal_score, abnormal)
        metrics["auc"] = auc
    except ValueError:
        metrics["auc"] = None
    if bm is None:
        # 7-class output collapsed onto the two categories
        bm = binary_metrics(abnormal_score, abnormal)
        metrics["binary_acc"] = bm.acc
        try:
            metrics["avg_acc"] = average_accuracy(cm)
        except ValueError:
            metrics["avg_acc"] = None
    metrics["sens"] = bm.sens
    metrics["spec"] = bm.spec
    return FoldResult(fold, task, metrics, cm, roc, probs, targets, list(cell_indices))


def evaluate_cells(net: Network, cells: Sequence[CellRecord], task: str, tta: TTAConfig,
                   aug: AugmentConfig, crop: int, means, fold: int = 0) -> FoldResult:
    probs = predict_cells(net, list(cells), tta, aug, crop, means)
    return fold_metrics(probs, [c.class_label for c in cells], task, fold, [c.index for c in cells])


METRIC_ORDER = ("auc", "acc", "sens", "spec", "avg_acc", "binary_acc")


@dataclass
class EvalReport:
    task: str
    channels: int
    folds: list[FoldResult]
    name: str = "model"
    aggregate: dict[str, Aggregate] = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregate and self.folds:
            self.aggregate = aggregate_folds([f.metrics for f in self.folds])

    @property
    def total_confusion(self) -> np.ndarray:
        return sum(f.confusion for f in self.folds)

    def summary_row(self) -> dict[str, str]:
        row = {"model": self.name, "channels": str(self.channels), "task": self.task}
        for k in METRIC_ORDER:
            if k in self.aggregate:
                row[k] = self.aggregate[k].format(percent=k != "auc")
        return row

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "task": self.task,
            "channels": self.channels,
            "aggregate": {k: {"mean": a.mean, "std": a.std, "n": a.n, "undefined_folds": list(a.undefined_folds)}
                          for k, a in self.aggregate.items()},
            "confusion_total": self.total_confusion.tolist(),
            "folds": [f.to_json() for f in self.folds],
        }

    def write(self, out_dir: str | Path, svg: bool = True) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_json(), indent=1) + "\n")
        row = self.summary_row()
        with (out / "summary.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
            w.writeheader()
            w.writerow(row)
        with (out / "fold_metrics.csv").open("w", newline="") as fh:
            keys = [k for k in METRIC_ORDER if k in self.aggregate]
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fold"] + keys)
            for f in self.folds:
                w.writerow([f.fold] + ["" if f.metrics.get(k) is None else repr(f.metrics[k]) for k in keys])
        for f in self.folds:
            if f.roc is not None:
                write_roc_csv(f.roc, out / f"roc_fold{f.fold}.csv")
            write_confusion_csv(f.confusion, out / f"confusion_fold{f.fold}.csv")
        write_confusion_csv(self.total_confusion, out / "confusion_total.csv")
        if svg:
            rocs = [f.roc for f in self.folds if f.roc is not None]
            if rocs:
                (out / "roc.svg").write_text(roc_svg(rocs))
            (out / "confusion.svg").write_text(confusion_svg(self.total_confusion))
        return out


def write_roc_csv(roc: RocCurve, path: Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr", "threshold"])
        for f, t, th in zip(roc.fpr, roc.tpr, roc.thresholds):
            w.writerow([repr(float(f)), repr(float(t)), repr(float(th))])


def write_confusion_csv(cm: np.ndarray, path: Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + list(range(cm.shape[1])))
        for i, r in enumerate(cm):
            w.writerow([i] + [int(v) for v in r])


def roc_svg(rocs: Sequence[RocCurve], size: int = 320) -> str:
    pad = 30
    span = size - 2 * pad
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="#444"/>',
             f'<line x1="{pad}" y1="{pad + span}" x2="{pad + span}" y2="{pad}" stroke="#bbb" stroke-dasharray="4"/>']
    for i, roc in enumerate(rocs):
        pts = " ".join(f"{pad + x * span:.1f},{pad + (1 - y) * span:.1f}" for x, y in zip(roc.fpr, roc.tpr))
        hue = (i * 67) % 360
        parts.append(f'<polyline points="{pts}" fill="none" stroke="hsl({hue},70%,40%)" stroke-width="1.5"/>')
    parts.append(f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="11">false positive rate</text>')
    parts.append(f'<text x="10" y="{size / 2}" font-size="11" transform="rotate(-90 10 {size / 2})" '
                 f'text-anchor="middle">true positive rate</text></svg>')
    return "\n".join(parts)


def confusion_svg(cm: np.ndarray, cell: int = 40) -> str:
    n = cm.shape[0]
    rows = cm.sum(axis=1, keepdims=True).astype(np.float64)
    frac = np.divide(cm, rows, out=np.zeros(cm.shape), where=rows > 0)
    size = n * cell + 40
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">']
    for i in range(n):
        for j in range(n):
            shade = int(255 * (1 - frac[i, j]))
            parts.append(f'<rect x="{30 + j * cell}" y="{30 + i * cell}" width="{cell}" height="{cell}" '
                         f'fill="rgb({shade},{shade},255)" stroke="#fff"/>')
            parts.append(f'<text x="{30 + j * cell + cell / 2}" y="{30 + i * cell + cell / 2 + 4}" '
                         f'text-anchor="middle" font-size="11">{int(cm[i, j])}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
