"""Experiment configuration: one JSON document, overridable from env and flags.

Precedence, lowest first: built-in defaults, config file, ``PAPNET_*``
environment variables, ``--set`` / dedicated CLI flags. Environment keys use
``__`` for nesting, e.g. ``PAPNET_TRAIN__EPOCHS=5`` or ``PAPNET_SEED=3``.

Section seeds (augment, train, tta, folds) default to the top-level seed.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .augment import AugmentConfig
from .data import LabelColorMap
from .errors import ConfigError
from .evaluate import TTAConfig
from .nn.network import InitPolicy, build_network
from .nn.presets import PRESETS as NET_PRESETS
from .nn.presets import preset_spec
from .train import TASKS, TrainConfig, train_preset

ENV_PREFIX = "PAPNET_"

DEFAULTS: dict[str, Any] = {
    "manifest": None,
    "cell_as_patient": False,
    "colors": None,
    "channels": 5,
    "task": "2class",
    "network": "cellnet-s",
    "init": {"mode": "scratch", "checkpoint": None, "n_random_fc": 1, "gaussian_std": 0.01},
    "augment": {"m": 128, "d": 10, "target_per_class": 12000, "out_size": 256, "rotation_interp": "bilinear"},
    "train": {"preset": "cellnet-s"},
    "tta": {"n_random_views": 10, "n_crops": 10, "d": None},
    "folds": {"path": None, "k": 5},
    "out": "runs",
    "seed": 0,
    "workers": 1,
}


def deep_merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {k} is not a section")
    node[keys[-1]] = value


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX) or key == ENV_PREFIX + "DEBUG":
            continue
        path = key[len(ENV_PREFIX):].lower().replace("__", ".")
        set_path(out, path, _parse_value(raw))
    return out


def parse_set(items) -> dict:
    out: dict = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        set_path(out, k.strip(), _parse_value(v))
    return out


def _dataclass(cls, section: str, values: Mapping):
    known = set(cls.__dataclass_fields__)
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    manifest: Path | None
    cell_as_patient: bool
    colors: LabelColorMap
    channels: int
    task: str
    network: str
    init: InitPolicy
    augment: AugmentConfig
    train: TrainConfig
    tta: TTAConfig
    folds_path: Path
    k: int
    fold_seed: int
    out: Path
    seed: int
    workers: int

    @property
    def n_classes(self) -> int:
        return 2 if self.task == "2class" else 7

    @property
    def run_name(self) -> str:
        net = Path(self.network).stem if self.network not in NET_PRESETS else self.network
        return f"{net}-{self.channels}C-{self.task}"

    def network_spec(self) -> dict:
        if self.network in NET_PRESETS:
            return preset_spec(self.network, self.train.crop, self.channels, self.n_classes)
        return json.loads(Path(self.network).read_text())

    def resolved(self) -> dict:
        """Fully resolved document; reloading it yields the same experiment."""
        return self.raw


def resolve(doc: Mapping, base_dir: str | Path = ".") -> ExperimentConfig:
    """Validate a merged config document into an :class:`ExperimentConfig`."""
    doc = deep_merge(DEFAULTS, doc)
    base_dir = Path(base_dir)
    seed = doc["seed"]
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")

    channels, task = doc["channels"], doc["task"]
    if channels not in (3, 5):
        raise ConfigError(f"channels: must be 3 or 5, got {channels!r}")
    if task not in TASKS:
        raise ConfigError(f"task: must be one of {TASKS}, got {task!r}")

    def absolute(p):
        if p is None:
            return None
        p = Path(p)
        return str(p if p.is_absolute() else (base_dir / p).resolve())

    doc["manifest"] = absolute(doc["manifest"])
    doc["out"] = absolute(doc["out"])
    if doc["network"] not in NET_PRESETS:
        doc["network"] = absolute(doc["network"])
        if not Path(doc["network"]).is_file():
            raise ConfigError(f"network: {doc['network']} is neither a preset ({sorted(NET_PRESETS)}) nor a file")
    if doc["init"].get("checkpoint"):
        doc["init"]["checkpoint"] = absolute(doc["init"]["checkpoint"])
    if doc["folds"].get("path") is None:
        doc["folds"]["path"] = str(Path(doc["out"]) / "folds.json")
    doc["folds"]["path"] = absolute(doc["folds"]["path"])
    for section in ("augment", "train", "tta", "folds"):
        doc[section].setdefault("seed", seed)
        if doc[section]["seed"] is None:
            doc[section]["seed"] = seed

    aug = _dataclass(AugmentConfig, "augment", doc["augment"])
    train_doc = dict(doc["train"])
    preset = train_doc.pop("preset", None)
    try:
        tcfg = train_preset(preset, **train_doc) if preset else _dataclass(TrainConfig, "train", train_doc)
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from None
    if tcfg.crop > aug.out_size:
        raise ConfigError(f"train.crop {tcfg.crop} exceeds augment.out_size {aug.out_size}")
    tta = _dataclass(TTAConfig, "tta", doc["tta"])
    init = _dataclass(InitPolicy, "init", doc["init"])
    try:
        colors = LabelColorMap.from_config(doc["colors"]) if doc["colors"] else LabelColorMap.default()
    except ValueError as exc:
        raise ConfigError(f"colors: {exc}") from None
    folds = doc["folds"]
    if not isinstance(folds.get("k"), int) or folds["k"] < 2:
        raise ConfigError("folds.k must be an integer >= 2")

    cfg = ExperimentConfig(
        raw=doc,
        manifest=Path(doc["manifest"]) if doc["manifest"] else None,
        cell_as_patient=bool(doc["cell_as_patient"]),
        colors=colors,
        channels=channels,
        task=task,
        network=doc["network"],
        init=init,
        augment=aug,
        train=tcfg,
        tta=tta,
        folds_path=Path(folds["path"]),
        k=folds["k"],
        fold_seed=folds["seed"],
        out=Path(doc["out"]),
        seed=seed,
        workers=int(doc["workers"]),
    )
    _check_network(cfg)
    return cfg


def _check_network(cfg: ExperimentConfig) -> None:
    spec = cfg.network_spec()
    try:
        net = build_network(spec)
    except ConfigError as exc:
        raise ConfigError(f"network: {exc}") from None
    if net.channels != cfg.channels:
        raise ConfigError(f"network: input has {net.channels} channels but channels={cfg.channels}")
    if net.n_classes != cfg.n_classes:
        raise ConfigError(f"network: output width {net.n_classes} does not fit task {cfg.task}")
    if net.input_shape[:2] != (cfg.train.crop, cfg.train.crop):
        raise ConfigError(f"network: input {net.input_shape[:2]} does not match train.crop {cfg.train.crop}")


def load_config(path: str | Path | None = None, overrides: Mapping | None = None,
                environ: Mapping[str, str] | None = None) -> ExperimentConfig:
    doc: dict = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        base = path.parent
    doc = deep_merge(doc, env_overrides(environ))
    doc = deep_merge(doc, overrides or {})
    return resolve(doc, base)
