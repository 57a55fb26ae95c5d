from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from papnet.data import (
    HERLEV_CLASS_COUNTS,
    CellRecord,
    DatasetManifest,
    ManifestEntry,
    SyntheticSpec,
    decode_all,
    generate_synthetic,
)


def herlev_entries(cells_per_patient: int | None = 1, seed: int = 0) -> list[ManifestEntry]:
    """917 rows with the Herlev per-class counts; patients of 1-4 cells when cells_per_patient is None."""
    labels = [c for c, n in sorted(HERLEV_CLASS_COUNTS.items()) for _ in range(n)]
    rng = np.random.default_rng(seed)
    if cells_per_patient is None:
        # patients own cells of a single class, group sizes drawn from 1..4
        pids, p = [], 0
        i = 0
        while i < len(labels):
            g = int(rng.integers(1, 5))
            run = [j for j in range(i, min(i + g, len(labels))) if labels[j] == labels[i]]
            pids.extend([f"H{p:04d}"] * len(run))
            p += 1
            i += len(run)
    else:
        pids = [f"H{i // cells_per_patient:04d}" for i in range(len(labels))]
    return [ManifestEntry(f"im{i}.bmp", f"im{i}-d.bmp", c, pid) for i, (c, pid) in enumerate(zip(labels, pids))]


def herlev_manifest(cells_per_patient: int | None = 1, seed: int = 0) -> DatasetManifest:
    return DatasetManifest(Path("."), herlev_entries(cells_per_patient, seed))


def make_cell(h=24, w=24, nucleus=((10, 14), (10, 14)), cyto=((6, 18), (6, 18)), label=4,
              patient="P0", index=0, seed=0) -> CellRecord:
    rng = np.random.default_rng(seed)
    rgb = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    nuc = np.zeros((h, w), np.uint8)
    cyt = np.zeros((h, w), np.uint8)
    cyt[slice(*cyto[0]), slice(*cyto[1])] = 1
    nuc[slice(*nucleus[0]), slice(*nucleus[1])] = 1
    cyt[nuc == 1] = 0
    return CellRecord(rgb, nuc, cyt, label, patient, index)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("synth")
    generate_synthetic(out, SyntheticSpec(n_cells=60, image_size=40, cells_per_patient=2, seed=3))
    return out


@pytest.fixture(scope="session")
def synth_records(synth_dir):
    from papnet.data import load_manifest

    manifest = load_manifest(synth_dir / "manifest.csv")
    return manifest, decode_all(manifest)
