"""Balanced rotation/translation augmentation into five-channel samples.

Channel order is fixed everywhere: R, G, B, nucleus, cytoplasm. A three
channel pipeline is the first three planes of the five channel one.

Samples are described by provenance tuples (cell, rotation, jitter) and are
only rendered on demand, so an augmented set of any size costs no more memory
than its source records.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .data import CellRecord, category_of, nucleus_centroid
from .errors import ConfigError

log = logging.getLogger(__name__)

CHANNELS = ("R", "G", "B", "nucleus", "cytoplasm")


@dataclass(frozen=True)
class AugmentConfig:
    m: int = 128
    d: int = 10
    target_per_class: int = 12000
    out_size: int = 256
    seed: int = 0
    rotation_interp: str = "bilinear"
    tolerance: float = 0.05

    def __post_init__(self):
        if self.m <= 0:
            raise ConfigError("augment.m must be > 0")
        if self.d < 0:
            raise ConfigError("augment.d must be >= 0")
        if self.out_size < self.m:
            raise ConfigError("augment.out_size must be >= augment.m")
        if self.target_per_class <= 0:
            raise ConfigError("augment.target_per_class must be > 0")
        if self.rotation_interp not in ("nearest", "bilinear"):
            raise ConfigError("augment.rotation_interp must be 'nearest' or 'bilinear'")


# ---------------------------------------------------------------------------
# Planning


@dataclass(frozen=True)
class ClassPlan:
    count: int
    n_rot: int
    n_trans: int
    n_extra: int = 0

    @property
    def theta(self) -> float:
        return 360.0 / self.n_rot

    @property
    def multiplier(self) -> int:
        return self.n_rot * self.n_trans

    @property
    def expected(self) -> int:
        return self.count * self.multiplier + self.n_extra


@dataclass(frozen=True)
class AugmentPlan:
    classes: dict[int, ClassPlan]
    target_per_class: int

    def __getitem__(self, label: int) -> ClassPlan:
        return self.classes[label]

    def expected_counts(self) -> dict[int, int]:
        return {c: p.expected for c, p in self.classes.items()}


def _near_square(n: int) -> tuple[int, int]:
    """Factor n = a*b with a >= b and b as large as possible."""
    b = math.isqrt(n)
    while n % b:
        b -= 1
    return n // b, b


def plan_augmentation(per_class_counts: Mapping[int, int], cfg: AugmentConfig) -> AugmentPlan:
    """Pick rotations/translations per class so every class lands near the target.

    The per-cell multiplier is round(target / count), factored as N_r x N_t.
    When count x multiplier misses the target band (possible when the target is
    only a few times the class size), the multiplier is floored and the
    remainder is made up by one extra view on an evenly spread subset of cells.
    """
    target = cfg.target_per_class
    classes = {}
    for label, count in sorted(per_class_counts.items()):
        if count <= 0:
            raise ValueError(f"class {label}: count must be > 0")
        if target < count:
            warnings.warn(f"class {label}: target {target} below class size {count}; no augmentation")
            classes[label] = ClassPlan(count, 1, 1)
            continue
        mult = (2 * target + count) // (2 * count)  # half-up
        extra = 0
        lo, hi = (1 - cfg.tolerance) * target, (1 + cfg.tolerance) * target
        if not lo <= count * mult <= hi:
            mult = target // count
            extra = target - count * mult
        n_rot, n_trans = _near_square(mult)
        classes[label] = ClassPlan(count, n_rot, n_trans, extra)
    return AugmentPlan(classes, target)


# ---------------------------------------------------------------------------
# Geometry


def rotate_cell(cell: CellRecord, degrees: float, cfg: AugmentConfig = AugmentConfig()) -> CellRecord:
    """Rotate counter-clockwise (as displayed) about the image center, zero fill."""
    if not 0 <= degrees < 360:
        raise ValueError("degrees must be in [0, 360)")
    if degrees == 0:
        return cell
    h, w = cell.shape
    t = math.radians(degrees)
    cos, sin = round(math.cos(t), 12), round(math.sin(t), 12)
    cr, cc = (h - 1) / 2, (w - 1) / 2
    rr, cols = np.mgrid[:h, :w].astype(np.float64)
    dr, dc = rr - cr, cols - cc
    src = np.stack([cr + cos * dr + sin * dc, cc - sin * dr + cos * dc])

    order = 1 if cfg.rotation_interp == "bilinear" else 0
    rgb = np.stack(
        [ndimage.map_coordinates(cell.rgb[..., k].astype(np.float64), src, order=order, mode="constant", cval=0.0)
         for k in range(3)],
        axis=-1,
    )
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    nuc = ndimage.map_coordinates(cell.nucleus_mask, src, order=0, mode="constant", cval=0)
    cyt = ndimage.map_coordinates(cell.cytoplasm_mask, src, order=0, mode="constant", cval=0)
    return CellRecord(rgb, nuc, cyt, cell.class_label, cell.patient_id, cell.index)


def jitter_center(centroid: tuple[int, int], d: int, rng: np.random.Generator) -> tuple[int, int]:
    if d < 0:
        raise ValueError("d must be >= 0")
    dr, dc = rng.integers(-d, d + 1, size=2)
    return centroid[0] + int(dr), centroid[1] + int(dc)


def extract_patch(cell: CellRecord, center: tuple[int, int], m: int):
    """m x m window [center - m//2, center - m//2 + m) per axis, zero outside the image."""
    h, w = cell.shape
    r0, c0 = center[0] - m // 2, center[1] - m // 2
    rgb = np.zeros((m, m, 3), np.uint8)
    nuc = np.zeros((m, m), np.uint8)
    cyt = np.zeros((m, m), np.uint8)
    sr0, sr1 = max(r0, 0), min(r0 + m, h)
    sc0, sc1 = max(c0, 0), min(c0 + m, w)
    if sr0 < sr1 and sc0 < sc1:
        dst = (slice(sr0 - r0, sr1 - r0), slice(sc0 - c0, sc1 - c0))
        src = (slice(sr0, sr1), slice(sc0, sc1))
        rgb[dst] = cell.rgb[src]
        nuc[dst] = cell.nucleus_mask[src]
        cyt[dst] = cell.cytoplasm_mask[src]
    return rgb, nuc, cyt


def upsample_nearest(plane: np.ndarray, out_size: int) -> np.ndarray:
    m = plane.shape[0]
    idx = (np.arange(out_size) * m) // out_size
    return plane[idx][:, idx]


def assemble_tensor(patch, out_size: int) -> np.ndarray:
    rgb, nuc, cyt = patch
    stack = np.concatenate(
        [rgb.astype(np.float32) / np.float32(255.0), nuc[..., None].astype(np.float32), cyt[..., None].astype(np.float32)],
        axis=-1,
    )
    return np.ascontiguousarray(upsample_nearest(stack, out_size))


@dataclass(frozen=True)
class Provenance:
    cell_index: int
    patient_id: str
    rotation: float
    translation: tuple[int, int]


@dataclass(frozen=True, eq=False)
class Sample:
    tensor: np.ndarray
    label: int
    provenance: Provenance

    @property
    def category(self) -> str:
        return category_of(self.label)


def assemble_sample(patch, cfg: AugmentConfig, label: int, provenance: Provenance) -> Sample:
    return Sample(assemble_tensor(patch, cfg.out_size), label, provenance)


# ---------------------------------------------------------------------------
# Augmented sets


class _RotationCache:
    def __init__(self, cfg: AugmentConfig, capacity: int = 512):
        self.cfg = cfg
        self.capacity = capacity
        self._store: OrderedDict = OrderedDict()

    def get(self, cell: CellRecord, degrees: float):
        key = (cell.index, degrees)
        hit = self._store.get(key)
        if hit is not None:
            self._store.move_to_end(key)
            return hit
        rotated = rotate_cell(cell, degrees, self.cfg)
        value = (rotated, nucleus_centroid(rotated.nucleus_mask))
        self._store[key] = value
        if len(self._store) > self.capacity:
            self._store.popitem(last=False)
        return value


def render(cell: CellRecord, prov: Provenance, cfg: AugmentConfig, cache: _RotationCache | None = None) -> np.ndarray:
    if cache is not None:
        rotated, centroid = cache.get(cell, prov.rotation)
    else:
        rotated = rotate_cell(cell, prov.rotation, cfg)
        centroid = nucleus_centroid(rotated.nucleus_mask)
    center = (centroid[0] + prov.translation[0], centroid[1] + prov.translation[1])
    return assemble_tensor(extract_patch(rotated, center, cfg.m), cfg.out_size)


class AugmentedSet(Sequence[Sample]):
    """Lazily rendered samples defined by provenance tuples."""

    def __init__(self, records: Sequence[CellRecord], provenance: Sequence[Provenance], cfg: AugmentConfig):
        self.cfg = cfg
        self.records = {r.index: r for r in records}
        if len(self.records) != len(records):
            raise ValueError("records must carry distinct indices")
        self.provenance = list(provenance)
        self.labels = np.array([self.records[p.cell_index].class_label for p in self.provenance], dtype=np.int64)
        self._cache = _RotationCache(cfg)

    def __len__(self) -> int:
        return len(self.provenance)

    def __getitem__(self, i):  # type: ignore[override]
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        p = self.provenance[i]
        return Sample(render(self.records[p.cell_index], p, self.cfg, self._cache), int(self.labels[i]), p)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def tensors(self, indices: Sequence[int]) -> np.ndarray:
        s = self.cfg.out_size
        out = np.empty((len(indices), s, s, len(CHANNELS)), np.float32)
        for k, i in enumerate(indices):
            p = self.provenance[i]
            out[k] = render(self.records[p.cell_index], p, self.cfg, self._cache)
        return out

    def class_counts(self) -> dict[int, int]:
        labels, counts = np.unique(self.labels, return_counts=True)
        return {int(l): int(c) for l, c in zip(labels, counts)}


def _jitter_rng(seed: int, cell_index: int, rot: int, view: int) -> np.random.Generator:
    return np.random.default_rng([seed, cell_index, rot, view])


def build_training_set(records: Sequence[CellRecord], plan: AugmentPlan, cfg: AugmentConfig) -> AugmentedSet:
    """Enumerate N_r rotations x N_t jittered centers per cell, plus any top-up views.

    Each jitter draw is seeded from (seed, cell, rotation index, view index), so
    the set depends on nothing but its inputs.
    """
    if not records:
        raise ValueError("no records to augment")
    missing = {r.class_label for r in records} - set(plan.classes)
    if missing:
        raise ValueError(f"plan does not cover classes {sorted(missing)}")

    prov: list[Provenance] = []
    by_class: dict[int, list[CellRecord]] = {}
    for rec in records:
        by_class.setdefault(rec.class_label, []).append(rec)
        cp = plan[rec.class_label]
        for r in range(cp.n_rot):
            angle = r * cp.theta
            for t in range(cp.n_trans):
                jitter = jitter_center((0, 0), cfg.d, _jitter_rng(cfg.seed, rec.index, r, t))
                prov.append(Provenance(rec.index, rec.patient_id, angle, jitter))

    for label, recs in sorted(by_class.items()):
        cp = plan[label]
        if cp.n_extra <= 0:
            continue
        n = len(recs)
        # evenly spread extra views; a rotation half way between planned ones
        for j in range(cp.n_extra):
            rec = recs[(j * n) // cp.n_extra]
            r = j % cp.n_rot
            angle = (r + 0.5) * cp.theta % 360.0
            jitter = jitter_center((0, 0), cfg.d, _jitter_rng(cfg.seed, rec.index, r, cp.n_trans + j))
            prov.append(Provenance(rec.index, rec.patient_id, angle, jitter))
    return AugmentedSet(records, prov, cfg)


def build_eval_set(records: Sequence[CellRecord], cfg: AugmentConfig) -> AugmentedSet:
    """One unrotated, centered sample per cell."""
    return AugmentedSet(records, [Provenance(r.index, r.patient_id, 0.0, (0, 0)) for r in records], cfg)


# ---------------------------------------------------------------------------
# Views and normalization


def train_view(tensor: np.ndarray, crop: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random crop x crop window, mirrored left-right with probability 1/2."""
    size = tensor.shape[0]
    if crop > size or crop > tensor.shape[1]:
        raise ValueError(f"crop {crop} larger than sample {tensor.shape[:2]}")
    r0, c0 = rng.integers(0, size - crop + 1, size=2)
    view = tensor[r0 : r0 + crop, c0 : c0 + crop]
    if rng.random() < 0.5:
        view = view[:, ::-1]
    return view


def train_views(batch: np.ndarray, crop: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([train_view(t, crop, rng) for t in batch])


def center_crop(tensor: np.ndarray, crop: int) -> np.ndarray:
    h, w = tensor.shape[-3:-1]
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than sample {(h, w)}")
    r0, c0 = (h - crop) // 2, (w - crop) // 2
    return tensor[..., r0 : r0 + crop, c0 : c0 + crop, :]


def normalize(view: np.ndarray, channel_means: Sequence[float]) -> np.ndarray:
    means = np.asarray(channel_means, dtype=np.float32)
    if means.shape != (view.shape[-1],):
        raise ValueError(f"expected {view.shape[-1]} channel means, got {means.shape}")
    return view - means


def channel_means(samples: AugmentedSet, channels: int = 5, max_samples: int = 4096, batch: int = 256) -> np.ndarray:
    """Per-channel mean over (an evenly spaced subset of) a training set."""
    n = len(samples)
    idx = np.unique(np.linspace(0, n - 1, min(n, max_samples)).astype(np.int64))
    total = np.zeros(len(CHANNELS), np.float64)
    count = 0
    for s in range(0, len(idx), batch):
        t = samples.tensors(idx[s : s + batch])
        total += t.sum(axis=(0, 1, 2), dtype=np.float64)
        count += t.shape[0] * t.shape[1] * t.shape[2]
    return (total / count).astype(np.float32)[:channels]


def materialize(samples: AugmentedSet, out_dir: str | Path) -> Path:
    """Write each sample as raw little-endian float32 (C order, H x W x 5) plus index.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for i in range(len(samples)):
        s = samples[i]
        name = f"sample_{i:07d}.f32"
        s.tensor.astype("<f4").tofile(out / name)
        entry = {"file": name, "label": s.label, "shape": list(s.tensor.shape)}
        entry.update(asdict(s.provenance))
        entry["translation"] = list(s.provenance.translation)
        index.append(entry)
    path = out / "index.json"
    path.write_text(json.dumps({"channels": list(CHANNELS), "dtype": "<f4", "samples": index}, indent=1))
    return path
