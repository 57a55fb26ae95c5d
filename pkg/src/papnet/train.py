"""SGD training with momentum, weight decay and a step learning-rate schedule."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .augment import AugmentedSet, center_crop, channel_means, normalize, train_views
from .data import NORMAL_CLASSES
from .errors import ConfigError, NumericError
from .nn.network import Network, loss_softmax_xent

log = logging.getLogger(__name__)

TASKS = ("2class", "7class")


def target_index(class_labels, task: str) -> np.ndarray:
    """Network output index for Herlev class labels: normal/abnormal or class - 1."""
    labels = np.asarray(class_labels, dtype=np.int64)
    if task == "2class":
        return (~np.isin(labels, list(NORMAL_CLASSES))).astype(np.int64)
    if task == "7class":
        return labels - 1
    raise ConfigError(f"task must be one of {TASKS}, got {task!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    base_lr: float = 0.01
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 10
    momentum: float = 0.9
    weight_decay: float = 0.0005
    crop: int = 224
    seed: int = 0
    accum_steps: int = 1

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr_decay_every", "crop", "accum_steps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.base_lr < 0 or self.momentum < 0 or self.weight_decay < 0 or self.lr_decay_factor <= 0:
            raise ConfigError("train: learning rate, momentum, weight decay and decay factor must be non-negative")


PRESETS: dict[str, TrainConfig] = {
    "alexnet-t": TrainConfig(batch_size=256, base_lr=0.01, weight_decay=0.0005, crop=227),
    "googlenet-t": TrainConfig(batch_size=32, base_lr=0.005, weight_decay=0.0002, crop=224),
    "resnet-t": TrainConfig(batch_size=20, base_lr=0.01, weight_decay=0.0002, crop=224),
    "densenet-t": TrainConfig(batch_size=12, base_lr=0.01, weight_decay=0.0002, crop=224),
    "cellnet-s": TrainConfig(batch_size=32, base_lr=0.01, weight_decay=0.0005, crop=56),
}


def train_preset(name: str, **overrides) -> TrainConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown training preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.base_lr / cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    velocity: Mapping[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """In place: v <- momentum*v - lr*(g + weight_decay*w); w <- w + v."""
    for name, w in params.items():
        g, v = grads[name], velocity[name]
        if g.shape != w.shape or v.shape != w.shape:
            raise ValueError(f"{name}: shapes w{w.shape} g{g.shape} v{v.shape} differ")
        v *= momentum
        v -= lr * (g + weight_decay * w)
        w += v


@dataclass
class TrainResult:
    best_params: dict[str, np.ndarray]
    best_epoch: int
    history: list[dict]
    channel_means: np.ndarray
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


HISTORY_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "val_acc")


def write_history(history: Sequence[Mapping], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_FIELDS])


def predict_batches(net: Network, x_source: Callable[[Sequence[int]], np.ndarray], n: int,
                    batch_size: int = 64) -> np.ndarray:
    out = []
    for s in range(0, n, batch_size):
        out.append(net.forward(x_source(range(s, min(n, s + batch_size))), train=False))
    return np.concatenate(out) if out else np.zeros((0, net.n_classes), np.float32)


def _val_accuracy(net: Network, val_set: AugmentedSet, cfg: TrainConfig, channels: int,
                  means: np.ndarray, task: str) -> float:
    def source(idx):
        x = val_set.tensors(list(idx))[..., :channels]
        return normalize(center_crop(x, cfg.crop), means)

    logits = predict_batches(net, source, len(val_set))
    return float(np.mean(logits.argmax(axis=1) == target_index(val_set.labels, task)))


def train(
    net: Network,
    train_set: AugmentedSet,
    val_set: AugmentedSet | None,
    cfg: TrainConfig,
    *,
    channels: int | None = None,
    task: str = "2class",
    means: np.ndarray | None = None,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train ``net`` in place; the best-validation parameters are kept aside.

    One epoch is one pass over the augmented training set. Each epoch is
    shuffled with a generator seeded from (seed, epoch), which also draws the
    crop positions and mirror flags.
    """
    if len(train_set) == 0:
        raise ValueError("empty training set")
    channels = channels or net.channels
    if channels != net.channels:
        raise ConfigError(f"pipeline has {channels} channels, network expects {net.channels}")
    if cfg.crop > train_set.cfg.out_size:
        raise ConfigError(f"crop {cfg.crop} exceeds sample size {train_set.cfg.out_size}")
    means = channel_means(train_set, channels) if means is None else np.asarray(means, np.float32)
    targets = target_index(train_set.labels, task)
    if targets.max() >= net.n_classes:
        raise ConfigError(f"task {task} needs {targets.max() + 1} outputs, network has {net.n_classes}")

    params = net.parameters()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    history: list[dict] = []
    best = (-1.0, 0, {k: v.copy() for k, v in params.items()})
    n = len(train_set)

    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        acc_grads: dict[str, np.ndarray] | None = None
        micro = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            x = train_set.tensors(idx)[..., :channels]
            x = normalize(train_views(x, cfg.crop, rng), means)
            logits = net.forward(x, train=True)
            loss, dlogits = loss_softmax_xent(logits, targets[idx])
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b} (lr={lr})")
            grads = net.backward(dlogits)
            loss_sum += loss * len(idx)
            correct += int(np.sum(logits.argmax(axis=1) == targets[idx]))
            if cfg.accum_steps == 1:
                sgd_step(params, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
                continue
            if acc_grads is None:
                acc_grads = {k: g.copy() for k, g in grads.items()}
            else:
                for k, g in grads.items():
                    acc_grads[k] += g
            micro += 1
            if micro == cfg.accum_steps or start + cfg.batch_size >= n:
                for g in acc_grads.values():
                    g /= micro
                sgd_step(params, acc_grads, velocity, lr, cfg.momentum, cfg.weight_decay)
                acc_grads, micro = None, 0
        val_acc = _val_accuracy(net, val_set, cfg, channels, means, task) if val_set is not None and len(val_set) else float("nan")
        row = {"epoch": epoch, "lr": lr, "train_loss": loss_sum / n, "train_acc": correct / n, "val_acc": val_acc}
        history.append(row)
        log.info("epoch %d lr %.2g loss %.4f train %.3f val %.3f", epoch, lr, row["train_loss"], row["train_acc"], val_acc)
        if progress:
            progress(row)
        score = val_acc if val_set is not None and len(val_set) else float(epoch)
        if score > best[0]:
            best = (score, epoch, {k: v.copy() for k, v in params.items()})

    return TrainResult(best[2], best[1], history, means, velocity)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
