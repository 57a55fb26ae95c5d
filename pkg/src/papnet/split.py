"""Patient-level, class-stratified k-fold cross-validation."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import DatasetManifest, ManifestEntry
from .errors import ConfigError, ProvenanceError


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    assignment: dict[str, int]

    def fold_of(self, patient_id: str) -> int:
        return self.assignment[patient_id]

    def fold_cells(self, manifest: DatasetManifest | Sequence[ManifestEntry]) -> list[list[int]]:
        """Manifest row indices per fold."""
        folds: list[list[int]] = [[] for _ in range(self.k)]
        for i, e in enumerate(manifest):
            try:
                folds[self.assignment[e.patient_id]].append(i)
            except KeyError:
                raise ConfigError(f"patient {e.patient_id!r} missing from fold plan") from None
        return folds

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "seed": self.seed, "assignment": self.assignment}, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        doc = json.loads(text)
        try:
            plan = cls(int(doc["k"]), int(doc["seed"]), {str(p): int(f) for p, f in doc["assignment"].items()})
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed fold plan: {exc}") from exc
        if any(not 0 <= f < plan.k for f in plan.assignment.values()):
            raise ConfigError("fold index out of range in fold plan")
        return plan

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FoldPlan":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def make_folds(manifest: DatasetManifest | Sequence[ManifestEntry], k: int = 5, seed: int = 0) -> FoldPlan:
    """Greedy grouped stratification.

    Patients are visited by descending cell count (seeded shuffle breaks ties)
    and each goes to the fold where it least increases the squared deviation
    of per-fold class counts and fold sizes from their ideal shares. Remaining
    ties go to the lowest fold index.
    """
    entries = list(manifest)
    if k < 2:
        raise ConfigError("k must be >= 2")
    patients: dict[str, int] = {}
    for e in entries:
        patients.setdefault(e.patient_id, len(patients))
    if len(patients) < k:
        raise ConfigError(f"{len(patients)} patients cannot fill {k} folds")

    classes = sorted({e.class_label for e in entries})
    col = {c: j for j, c in enumerate(classes)}
    per_patient = np.zeros((len(patients), len(classes)), np.int64)
    for e in entries:
        per_patient[patients[e.patient_id], col[e.class_label]] += 1
    sizes = per_patient.sum(axis=1)

    rng = np.random.default_rng(seed)
    tiebreak = rng.permutation(len(patients))
    order = np.lexsort((tiebreak, -sizes))

    ideal_class = per_patient.sum(axis=0) / k
    ideal_size = len(entries) / k
    fold_class = np.zeros((k, len(classes)), np.float64)
    fold_size = np.zeros(k, np.float64)
    assignment_idx = np.empty(len(patients), np.int64)
    for p in order:
        a = per_patient[p]
        s = sizes[p]
        delta = ((2 * (fold_class - ideal_class) + a) * a).sum(axis=1) + (2 * (fold_size - ideal_size) + s) * s
        f = int(np.argmin(delta))
        assignment_idx[p] = f
        fold_class[f] += a
        fold_size[f] += s

    names = list(patients)
    return FoldPlan(k, seed, {names[i]: int(assignment_idx[i]) for i in range(len(names))})


def fold_split(
    plan: FoldPlan, fold_index: int, manifest: DatasetManifest | Sequence[ManifestEntry]
) -> tuple[list[int], list[int]]:
    """(train, validation) manifest row indices for one fold."""
    if not 0 <= fold_index < plan.k:
        raise IndexError(f"fold {fold_index} out of range for k={plan.k}")
    train, val = [], []
    for i, e in enumerate(manifest):
        (val if plan.fold_of(e.patient_id) == fold_index else train).append(i)
    return train, val


@dataclass(frozen=True)
class LeakageReport:
    patients: tuple[str, ...]
    cells: tuple[int, ...]

    @property
    def ok(self) -> bool:
        return not self.patients and not self.cells

    def __str__(self) -> str:
        if self.ok:
            return "no leakage"
        return f"leaked patients: {', '.join(self.patients)}; leaked cells: {list(self.cells)}"


def _provenance(items: Iterable) -> list:
    out = []
    for it in items:
        prov = getattr(it, "provenance", it)
        if prov is None or not hasattr(prov, "patient_id") or not hasattr(prov, "cell_index"):
            raise ProvenanceError(f"sample without provenance: {it!r}")
        out.append(prov)
    return out


def audit_leakage(plan: FoldPlan | None, train_samples: Iterable, val_samples: Iterable) -> LeakageReport:
    """Patients and cells that occur on both sides of a split.

    Accepts samples, augmented sets or bare provenance records. When a plan is
    given, a training patient also counts as leaked if the plan assigns it to a
    fold that the validation side draws from.
    """
    if hasattr(train_samples, "provenance") and not hasattr(train_samples, "tensor"):
        train_samples = train_samples.provenance
    if hasattr(val_samples, "provenance") and not hasattr(val_samples, "tensor"):
        val_samples = val_samples.provenance
    tr, va = _provenance(train_samples), _provenance(val_samples)
    tr_pat = {p.patient_id for p in tr}
    va_pat = {p.patient_id for p in va}
    leaked = tr_pat & va_pat
    if plan is not None:
        val_folds = {plan.assignment.get(p) for p in va_pat} - {None}
        leaked |= {p for p in tr_pat if plan.assignment.get(p) in val_folds}
    cells = {p.cell_index for p in tr} & {p.cell_index for p in va}
    return LeakageReport(tuple(sorted(leaked)), tuple(sorted(cells)))
