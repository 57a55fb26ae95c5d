"""Dataset ingestion: manifests, cell decoding and the synthetic cell generator.

A manifest is a UTF-8 CSV with header ``image,segmentation,class,patient``;
paths are relative to the manifest's directory. Segmentation images encode
regions by color, translated through a :class:`LabelColorMap`.
"""
from __future__ import annotations

import csv
import logging
import warnings
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import (
    DimensionMismatch,
    EmptyMask,
    EmptyNucleus,
    InvalidClass,
    ManifestError,
    UnmappedColor,
)

log = logging.getLogger(__name__)

CLASS_LABELS = tuple(range(1, 8))
NORMAL_CLASSES = frozenset({1, 2, 3})
REGIONS = ("background", "cytoplasm", "nucleus", "other")
MANIFEST_COLUMNS = ("image", "segmentation", "class", "patient")

CELL_TYPES = {
    1: "Superficial squamous epithelial",
    2: "Intermediate squamous epithelial",
    3: "Columnar epithelial",
    4: "Mild squamous non-keratinizing dysplasia",
    5: "Moderate squamous non-keratinizing dysplasia",
    6: "Severe squamous non-keratinizing dysplasia",
    7: "Squamous cell carcinoma in situ intermediate",
}

# Per-class cell counts of the public Herlev release.
HERLEV_CLASS_COUNTS = {1: 74, 2: 70, 3: 98, 4: 182, 5: 146, 6: 197, 7: 150}


def category_of(class_label: int) -> str:
    if class_label not in CLASS_LABELS:
        raise InvalidClass(f"class label {class_label!r} outside 1-7")
    return "normal" if class_label in NORMAL_CLASSES else "abnormal"


# ---------------------------------------------------------------------------
# Manifest


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    segmentation: str
    class_label: int
    patient_id: str

    @property
    def category(self) -> str:
        return category_of(self.class_label)


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def __getitem__(self, i: int) -> ManifestEntry:
        return self.entries[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.class_label for e in self.entries], dtype=np.int64)

    @property
    def patients(self) -> list[str]:
        return [e.patient_id for e in self.entries]

    def subset(self, indices: Iterable[int]) -> list[ManifestEntry]:
        return [self.entries[i] for i in indices]


def _parse_class(raw: str, lineno: int) -> int:
    try:
        value = int(raw.strip())
    except (ValueError, AttributeError):
        raise InvalidClass(f"line {lineno}: class {raw!r} is not an integer") from None
    if value not in CLASS_LABELS:
        raise InvalidClass(f"line {lineno}: class {value} outside 1-7")
    return value


def load_manifest(
    path: str | Path, *, check_files: bool = True, cell_as_patient: bool = False
) -> DatasetManifest:
    """Read and validate a manifest CSV.

    With ``cell_as_patient`` the ``patient`` column becomes optional and each
    row is treated as its own patient; the resulting folds are then cell-level,
    not patient-level, and a warning says so.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc

    reader = csv.DictReader(text.splitlines())
    header = [h.strip() for h in (reader.fieldnames or [])]
    required = MANIFEST_COLUMNS[:3] if cell_as_patient else MANIFEST_COLUMNS
    missing = [c for c in required if c not in header]
    if missing:
        raise ManifestError(f"{path}: missing column(s) {', '.join(missing)}")
    reader.fieldnames = header

    root = path.parent
    entries = []
    for lineno, row in enumerate(reader, start=2):
        label = _parse_class(row.get("class") or "", lineno)
        if cell_as_patient:
            patient = f"cell{len(entries):05d}"
        else:
            patient = (row.get("patient") or "").strip()
            if not patient:
                raise ManifestError(f"line {lineno}: empty patient id")
        image = (row.get("image") or "").strip()
        seg = (row.get("segmentation") or "").strip()
        if check_files:
            for p in (image, seg):
                if not p or not (root / p).is_file():
                    raise ManifestError(f"line {lineno}: file not found: {root / p}")
        entries.append(ManifestEntry(image, seg, label, patient))

    if cell_as_patient:
        warnings.warn(
            "cell-as-patient mode: every cell is its own patient. Cross-validation "
            "folds are cell-level and NOT patient-level; cells from one patient "
            "may leak between training and validation.",
            UserWarning,
            stacklevel=2,
        )
    return DatasetManifest(root=root, entries=entries)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            writer.writerow([e.image, e.segmentation, e.class_label, e.patient_id])


@dataclass(frozen=True)
class DatasetStats:
    total: int
    per_class: dict[int, int]
    per_category: dict[str, int]
    per_patient: dict[str, int]

    def table(self) -> str:
        lines = ["Category  Class  Cell type                                      Num."]
        for c in CLASS_LABELS:
            lines.append(
                f"{category_of(c).capitalize():<9} {c:<6} {CELL_TYPES[c]:<46} {self.per_class[c]:>4}"
            )
        lines.append(
            f"total {self.total} ({self.per_category['normal']} normal, "
            f"{self.per_category['abnormal']} abnormal) from {len(self.per_patient)} patients"
        )
        return "\n".join(lines)


def dataset_stats(manifest: DatasetManifest | Sequence[ManifestEntry]) -> DatasetStats:
    entries = list(manifest)
    per_class = {c: 0 for c in CLASS_LABELS}
    per_category = {"normal": 0, "abnormal": 0}
    for e in entries:
        per_class[e.class_label] += 1
        per_category[e.category] += 1
    per_patient = dict(Counter(e.patient_id for e in entries))
    return DatasetStats(len(entries), per_class, per_category, per_patient)


# ---------------------------------------------------------------------------
# Segmentation colors and cell records


def _parse_color(key: str | Sequence[int]) -> tuple[int, int, int]:
    if isinstance(key, str):
        s = key.strip()
        if s.startswith("#") and len(s) == 7:
            return tuple(int(s[i : i + 2], 16) for i in (1, 3, 5))  # type: ignore[return-value]
        parts = [p for p in s.replace(" ", "").split(",") if p]
        if len(parts) == 1:
            v = int(parts[0])
            return (v, v, v)
        key = [int(p) for p in parts]
    rgb = tuple(int(v) for v in key)
    if len(rgb) != 3 or not all(0 <= v <= 255 for v in rgb):
        raise ValueError(f"bad color {key!r}")
    return rgb  # type: ignore[return-value]


@dataclass(frozen=True)
class LabelColorMap:
    """Segmentation color -> region lookup.

    The default is papnet's own convention (black background, mid-grey
    cytoplasm, white nucleus), which is also what :func:`generate_synthetic`
    writes. Herlev ground-truth images must be checked and mapped explicitly.
    """

    colors: Mapping[tuple[int, int, int], str]

    def __post_init__(self):
        bad = {c: r for c, r in self.colors.items() if r not in REGIONS}
        if bad:
            raise ValueError(f"unknown region names: {bad}")

    @classmethod
    def default(cls) -> "LabelColorMap":
        return cls({(0, 0, 0): "background", (128, 128, 128): "cytoplasm", (255, 255, 255): "nucleus"})

    @classmethod
    def from_config(cls, mapping: Mapping[str, str]) -> "LabelColorMap":
        return cls({_parse_color(k): v for k, v in mapping.items()})

    def to_config(self) -> dict[str, str]:
        return {"#%02x%02x%02x" % c: r for c, r in self.colors.items()}

    def color_of(self, region: str) -> tuple[int, int, int]:
        for c, r in self.colors.items():
            if r == region:
                return c
        raise KeyError(region)

    def regions(self, seg: np.ndarray) -> dict[str, np.ndarray]:
        """Boolean mask per region for an H x W x 3 uint8 segmentation image."""
        packed = (seg[..., 0].astype(np.int64) << 16) | (seg[..., 1].astype(np.int64) << 8) | seg[..., 2]
        present = np.unique(packed)
        lut = {(c[0] << 16) | (c[1] << 8) | c[2]: r for c, r in self.colors.items()}
        unmapped = [int(p) for p in present if int(p) not in lut]
        if unmapped:
            shown = ", ".join("#%06x" % p for p in unmapped[:8])
            raise UnmappedColor(f"segmentation colors not in color map: {shown}")
        out = {}
        for region in REGIONS:
            keys = [k for k, r in lut.items() if r == region]
            out[region] = np.isin(packed, keys)
        return out


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CellRecord:
    """One decoded cell. Arrays are read-only after construction."""

    rgb: np.ndarray
    nucleus_mask: np.ndarray
    cytoplasm_mask: np.ndarray
    class_label: int
    patient_id: str
    index: int = -1

    def __post_init__(self):
        rgb = np.ascontiguousarray(self.rgb, dtype=np.uint8)
        nuc = np.ascontiguousarray(self.nucleus_mask, dtype=np.uint8)
        cyt = np.ascontiguousarray(self.cytoplasm_mask, dtype=np.uint8)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise DimensionMismatch(f"rgb must be H x W x 3, got {rgb.shape}")
        if nuc.shape != rgb.shape[:2] or cyt.shape != rgb.shape[:2]:
            raise DimensionMismatch(
                f"mask shapes {nuc.shape}/{cyt.shape} do not match image {rgb.shape[:2]}"
            )
        if nuc.max(initial=0) > 1 or cyt.max(initial=0) > 1:
            raise ValueError("masks must be {0,1}-valued")
        if np.any(nuc & cyt):
            raise ValueError("nucleus and cytoplasm masks overlap")
        if not nuc.any():
            raise EmptyNucleus(f"cell {self.index}: nucleus mask is empty")
        category_of(self.class_label)
        object.__setattr__(self, "rgb", _freeze(rgb))
        object.__setattr__(self, "nucleus_mask", _freeze(nuc))
        object.__setattr__(self, "cytoplasm_mask", _freeze(cyt))

    @property
    def category(self) -> str:
        return category_of(self.class_label)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rgb.shape[:2]


def _read_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise ManifestError(f"cannot decode image {path}: {exc}") from exc


def decode_cell(
    entry: ManifestEntry,
    colors: LabelColorMap | None = None,
    root: str | Path = ".",
    index: int = -1,
) -> CellRecord:
    colors = colors or LabelColorMap.default()
    root = Path(root)
    rgb = _read_rgb(root / entry.image)
    seg = _read_rgb(root / entry.segmentation)
    if rgb.shape != seg.shape:
        raise DimensionMismatch(
            f"{entry.image}: image {rgb.shape[:2]} vs segmentation {seg.shape[:2]}"
        )
    regions = colors.regions(seg)
    nucleus = regions["nucleus"]
    if not nucleus.any():
        raise EmptyNucleus(f"{entry.segmentation}: no nucleus pixels")
    cytoplasm = regions["cytoplasm"] & ~nucleus
    return CellRecord(
        rgb=rgb,
        nucleus_mask=nucleus.astype(np.uint8),
        cytoplasm_mask=cytoplasm.astype(np.uint8),
        class_label=entry.class_label,
        patient_id=entry.patient_id,
        index=index,
    )


def decode_all(
    manifest: DatasetManifest, colors: LabelColorMap | None = None, workers: int = 1
) -> list[CellRecord]:
    """Decode every manifest row; record ``index`` is the row position."""
    def one(i: int) -> CellRecord:
        return decode_cell(manifest.entries[i], colors, manifest.root, index=i)

    idx = range(len(manifest))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, idx))
    return [one(i) for i in idx]


def nucleus_centroid(mask: np.ndarray) -> tuple[int, int]:
    """Mean foreground coordinate, each axis rounded half-up."""
    rows, cols = np.nonzero(mask)
    n = rows.size
    if n == 0:
        raise EmptyMask("centroid of an empty mask")
    # floor(sum/n + 1/2) in exact integer arithmetic
    r = (2 * int(rows.sum()) + n) // (2 * n)
    c = (2 * int(cols.sum()) + n) // (2 * n)
    return r, c


# ---------------------------------------------------------------------------
# Synthetic cells


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the ellipse-cell generator.

    Class is a pure function of the nucleus/cytoplasm area ratio (measured on
    the emitted masks, cytoplasm excluding nucleus) and, for the
    ``ratio+darkness`` rule, of the nucleus darkness. Cytoplasm is drawn with
    little contrast against noisy background, so its extent is mostly
    recoverable from the mask channel rather than from RGB.
    """

    n_cells: int = 100
    image_size: int = 48
    n_classes: int = 2
    rule: str = "ratio"
    threshold: float = 0.3
    ratio_range: tuple[float, float] = (0.08, 0.6)
    margin: float = 0.04
    darkness_threshold: float = 0.4
    labels: tuple[int, ...] | None = None
    cells_per_patient: int = 1
    cyto_radius: tuple[float, float] = (5.5, 10.5)
    rgb_noise: float = 0.12
    cyto_contrast: float = 0.03
    debris: int = 3
    seed: int = 0

    def resolved_labels(self) -> tuple[int, ...]:
        if self.labels is not None:
            if len(self.labels) != self.n_classes:
                raise ValueError("labels must have n_classes entries")
            return tuple(self.labels)
        if self.n_classes == 2:
            return (1, 4)
        if 1 <= self.n_classes <= 7:
            return tuple(range(1, self.n_classes + 1))
        raise ValueError("n_classes must be in 1..7")

    def ratio_thresholds(self) -> np.ndarray:
        n_ratio = self.n_classes // 2 if self.rule == "ratio+darkness" else self.n_classes
        if n_ratio == 2:
            return np.array([self.threshold])
        lo, hi = self.ratio_range
        return np.linspace(lo, hi, n_ratio + 1)[1:-1]


def _ellipse(shape, center, axes, angle) -> np.ndarray:
    rr, cc = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    dr, dc = rr - center[0], cc - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dr + sa * dc
    v = -sa * dr + ca * dc
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0


def synthetic_label(spec: SyntheticSpec, ratio: float, darkness: float) -> int:
    labels = spec.resolved_labels()
    ratio_bin = int(np.searchsorted(spec.ratio_thresholds(), ratio, side="right"))
    if spec.rule == "ratio":
        return labels[ratio_bin]
    if spec.rule == "ratio+darkness":
        return labels[2 * ratio_bin + int(darkness > spec.darkness_threshold)]
    raise ValueError(f"unknown synthetic rule {spec.rule!r}")


def _synth_cell(spec: SyntheticSpec, i: int):
    rng = np.random.default_rng([spec.seed, i])
    size = spec.image_size
    shape = (size, size)
    thresholds = spec.ratio_thresholds()
    lo, hi = spec.ratio_range
    for _ in range(200):
        ratio_target = rng.uniform(lo, hi)
        if np.any(np.abs(ratio_target - thresholds) < spec.margin):
            continue
        center = np.array([size / 2 - 0.5, size / 2 - 0.5]) + rng.uniform(-2, 2, 2)
        axes = rng.uniform(*spec.cyto_radius, 2)
        angle = rng.uniform(0, np.pi)
        cell = _ellipse(shape, center, axes, angle)
        total = cell.sum()
        nuc_area = ratio_target * total / (1 + ratio_target)
        aspect = rng.uniform(0.75, 1.0)
        nb = np.sqrt(nuc_area / (np.pi * aspect))
        na = nb * aspect
        room = max(0.0, min(axes) - max(na, nb) - 1.0)
        off = rng.uniform(-1, 1, 2) * room * 0.5
        nucleus = _ellipse(shape, center + off, (na, nb), rng.uniform(0, np.pi)) & cell
        cyto = cell & ~nucleus
        if nucleus.sum() == 0 or cyto.sum() == 0:
            continue
        ratio = nucleus.sum() / cyto.sum()
        if np.any(np.abs(ratio - thresholds) < spec.margin / 2):
            continue
        darkness = rng.uniform(0.2, 0.6)
        if spec.rule == "ratio+darkness" and abs(darkness - spec.darkness_threshold) < 0.05:
            continue
        break
    else:  # pragma: no cover - parameters leave no admissible cells
        raise ValueError("synthetic parameters admit no valid cell")

    label = synthetic_label(spec, float(ratio), float(darkness))

    bg = np.array([0.80, 0.76, 0.82]) + rng.uniform(-0.05, 0.05, 3)
    img = np.broadcast_to(bg, shape + (3,)).copy()
    # slow shading across the field
    g = rng.normal(0, 0.04, 2)
    rr, cc = np.mgrid[: shape[0], : shape[1]] / size - 0.5
    img += (g[0] * rr + g[1] * cc)[..., None]
    img[cell] -= spec.cyto_contrast * np.array([0.4, 1.0, 0.6])
    img[nucleus] -= darkness * np.array([0.7, 0.8, 0.5])
    for _ in range(rng.integers(0, spec.debris + 1)):
        blob = _ellipse(shape, rng.uniform(0, size, 2), rng.uniform(1.0, 3.0, 2), rng.uniform(0, np.pi))
        img[blob] -= rng.uniform(0.1, 0.5) * np.array([0.7, 0.8, 0.5])
    img += rng.normal(0, spec.rgb_noise, img.shape)
    rgb = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return rgb, nucleus, cyto, label


def generate_synthetic(out_dir: str | Path, spec: SyntheticSpec = SyntheticSpec()) -> DatasetManifest:
    """Write ``spec.n_cells`` synthetic cells plus ``manifest.csv`` into ``out_dir``.

    Output bytes depend only on ``spec`` (including its seed).
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ManifestError(f"cannot create {out}: {exc}") from exc
    colors = LabelColorMap.default()
    c_bg, c_cy, c_nu = (np.array(colors.color_of(r), np.uint8) for r in ("background", "cytoplasm", "nucleus"))
    entries = []
    for i in range(spec.n_cells):
        rgb, nucleus, cyto, label = _synth_cell(spec, i)
        seg = np.broadcast_to(c_bg, rgb.shape).copy()
        seg[cyto] = c_cy
        seg[nucleus] = c_nu
        img_name, seg_name = f"cell_{i:05d}.png", f"cell_{i:05d}-seg.png"
        try:
            Image.fromarray(rgb).save(out / img_name)
            Image.fromarray(seg).save(out / seg_name)
        except OSError as exc:
            raise ManifestError(f"cannot write to {out}: {exc}") from exc
        entries.append(ManifestEntry(img_name, seg_name, label, f"P{i // spec.cells_per_patient:05d}"))
    manifest = DatasetManifest(root=out, entries=entries)
    write_manifest(manifest, out / "manifest.csv")
    log.info("wrote %d synthetic cells to %s", len(entries), out)
    return manifest
