from __future__ import annotations

import warnings

import numpy as np
import pytest
from conftest import herlev_manifest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from papnet.data import (
    CELL_TYPES,
    HERLEV_CLASS_COUNTS,
    CellRecord,
    DatasetManifest,
    LabelColorMap,
    ManifestEntry,
    SyntheticSpec,
    category_of,
    dataset_stats,
    decode_all,
    decode_cell,
    generate_synthetic,
    load_manifest,
    nucleus_centroid,
    write_manifest,
)
from papnet.errors import (
    DimensionMismatch,
    EmptyMask,
    EmptyNucleus,
    InvalidClass,
    ManifestError,
    UnmappedColor,
)

HEADER = "image,segmentation,class,patient\n"


def _write(tmp_path, body, header=HEADER):
    p = tmp_path / "m.csv"
    p.write_text(header + body)
    return p


def test_herlev_manifest_counts(tmp_path):
    write_manifest(herlev_manifest(), tmp_path / "h.csv")
    m = load_manifest(tmp_path / "h.csv", check_files=False)
    assert len(m) == 917
    stats = dataset_stats(m)
    assert stats.per_class == HERLEV_CLASS_COUNTS
    assert stats.per_category == {"normal": 242, "abnormal": 675}
    table = stats.table()
    for c, name in CELL_TYPES.items():
        assert name in table
    assert "242 normal, 675 abnormal" in table


def test_header_only_manifest_is_empty(tmp_path):
    m = load_manifest(_write(tmp_path, ""))
    assert len(m) == 0
    stats = dataset_stats(m)
    assert stats.total == 0 and set(stats.per_class.values()) == {0}
    assert stats.per_category == {"normal": 0, "abnormal": 0}


def test_manifest_errors(tmp_path):
    with pytest.raises(InvalidClass):
        load_manifest(_write(tmp_path, "a.png,b.png,8,p1\n"), check_files=False)
    with pytest.raises(InvalidClass):
        load_manifest(_write(tmp_path, "a.png,b.png,x,p1\n"), check_files=False)
    with pytest.raises(ManifestError, match="patient"):
        load_manifest(_write(tmp_path, "a.png,b.png,2, \n"), check_files=False)
    with pytest.raises(ManifestError, match="missing column"):
        load_manifest(_write(tmp_path, "a.png,b.png,2\n", header="image,segmentation,class\n"), check_files=False)
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(_write(tmp_path, "a.png,b.png,2,p1\n"))
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "absent.csv")


def test_manifest_preserves_order_and_paths(tmp_path):
    m = load_manifest(_write(tmp_path, "b.png,b-s.png,5,q\na.png,a-s.png,1,p\n"), check_files=False)
    assert [e.image for e in m] == ["b.png", "a.png"]
    assert m.root == tmp_path


def test_cell_as_patient_warns(tmp_path):
    path = _write(tmp_path, "a.png,b.png,1\nc.png,d.png,4\n", header="image,segmentation,class\n")
    with pytest.warns(UserWarning, match="NOT patient-level"):
        m = load_manifest(path, check_files=False, cell_as_patient=True)
    assert len(set(m.patients)) == 2


def test_category_exhaustive():
    for c in range(1, 8):
        assert (category_of(c) == "normal") == (c in {1, 2, 3})
    for bad in (0, 8, -1):
        with pytest.raises(InvalidClass):
            category_of(bad)


def test_small_stats():
    entries = [ManifestEntry("a", "b", c, "p") for c in (1, 1, 5)]
    stats = dataset_stats(entries)
    assert stats.per_class[1] == 2 and stats.per_class[5] == 1 and stats.total == 3


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 7), st.sampled_from("abcdef")), max_size=60))
def test_stats_totals_property(rows):
    stats = dataset_stats([ManifestEntry("i", "s", c, p) for c, p in rows])
    assert stats.total == len(rows)
    assert sum(stats.per_class.values()) == len(rows)
    assert sum(stats.per_category.values()) == len(rows)
    assert sum(stats.per_patient.values()) == len(rows)


def _save_pair(tmp_path, rgb, seg, name="c"):
    Image.fromarray(rgb).save(tmp_path / f"{name}.png")
    Image.fromarray(seg).save(tmp_path / f"{name}-s.png")
    return ManifestEntry(f"{name}.png", f"{name}-s.png", 4, "p")


def test_decode_two_by_two_nucleus(tmp_path):
    rgb = np.full((10, 10, 3), 200, np.uint8)
    seg = np.zeros((10, 10, 3), np.uint8)
    seg[2:8, 2:8] = 128
    seg[4:6, 4:6] = 255
    cell = decode_cell(_save_pair(tmp_path, rgb, seg), root=tmp_path)
    assert int(cell.nucleus_mask.sum()) == sum(1 for r in range(10) for c in range(10) if 4 <= r < 6 and 4 <= c < 6)
    assert cell.category == "abnormal"
    assert not np.any(cell.nucleus_mask & cell.cytoplasm_mask)
    assert int(cell.cytoplasm_mask.sum()) == 36 - 4


def test_decode_errors(tmp_path):
    rgb = np.zeros((10, 10, 3), np.uint8)
    with pytest.raises(EmptyNucleus):
        decode_cell(_save_pair(tmp_path, rgb, np.zeros((10, 10, 3), np.uint8)), root=tmp_path)
    seg = np.zeros((10, 10, 3), np.uint8)
    seg[1, 1] = (255, 255, 255)
    seg[2, 2] = (10, 200, 30)
    with pytest.raises(UnmappedColor, match="#0ac81e"):
        decode_cell(_save_pair(tmp_path, rgb, seg), root=tmp_path)
    seg = np.zeros((12, 10, 3), np.uint8)
    seg[1, 1] = 255
    with pytest.raises(DimensionMismatch):
        decode_cell(_save_pair(tmp_path, rgb, seg), root=tmp_path)


def test_custom_color_map(tmp_path):
    rgb = np.zeros((6, 6, 3), np.uint8)
    seg = np.zeros((6, 6, 3), np.uint8)
    seg[..., 2] = 255
    seg[1:3, 1:3] = (255, 0, 0)
    seg[5, 5] = (0, 255, 0)
    colors = LabelColorMap.from_config({"#0000ff": "background", "255,0,0": "nucleus", "#00ff00": "other"})
    cell = decode_cell(_save_pair(tmp_path, rgb, seg), colors, root=tmp_path)
    assert int(cell.nucleus_mask.sum()) == 4 and int(cell.cytoplasm_mask.sum()) == 0
    assert LabelColorMap.from_config(colors.to_config()) == colors


def test_cell_record_invariants():
    rgb = np.zeros((4, 4, 3), np.uint8)
    nuc = np.zeros((4, 4), np.uint8)
    nuc[1, 1] = 1
    cell = CellRecord(rgb, nuc, np.zeros((4, 4), np.uint8), 2, "p")
    assert cell.category == "normal"
    with pytest.raises(ValueError):
        cell.rgb[0, 0, 0] = 1
    with pytest.raises(ValueError, match="overlap"):
        CellRecord(rgb, nuc, nuc, 2, "p")
    with pytest.raises(ValueError, match="0,1"):
        CellRecord(rgb, nuc * 2, np.zeros((4, 4), np.uint8), 2, "p")
    with pytest.raises(EmptyNucleus):
        CellRecord(rgb, np.zeros((4, 4), np.uint8), np.zeros((4, 4), np.uint8), 2, "p")
    with pytest.raises(DimensionMismatch):
        CellRecord(rgb, np.ones((3, 4), np.uint8), np.zeros((3, 4), np.uint8), 2, "p")


def test_centroid_cases():
    m = np.zeros((10, 10), bool)
    m[7, 3] = True
    assert nucleus_centroid(m) == (7, 3)
    m = np.zeros((3, 3), bool)
    m[0, 0] = m[0, 2] = True
    assert nucleus_centroid(m) == (0, 1)
    m = np.zeros((4, 4), bool)
    m[0, 0] = m[0, 1] = True
    assert nucleus_centroid(m) == (0, 1)  # 0.5 rounds up
    with pytest.raises(EmptyMask):
        nucleus_centroid(np.zeros((3, 3), bool))


def _centroid_oracle(mask):
    rs, cs, n = 0, 0, 0
    for r in range(mask.shape[0]):
        for c in range(mask.shape[1]):
            if mask[r, c]:
                rs, cs, n = rs + r, cs + c, n + 1
    import math
    from fractions import Fraction

    return math.floor(Fraction(rs, n) + Fraction(1, 2)), math.floor(Fraction(cs, n) + Fraction(1, 2))


def test_centroid_matches_scan_oracle():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        mask = rng.random((32, 32)) < rng.uniform(0.005, 0.5)
        if not mask.any():
            mask[rng.integers(32), rng.integers(32)] = True
        assert nucleus_centroid(mask) == _centroid_oracle(mask)


def test_decoded_records_are_valid(synth_records):
    _, records = synth_records
    for r in records:
        assert set(np.unique(r.nucleus_mask)) <= {0, 1}
        assert set(np.unique(r.cytoplasm_mask)) <= {0, 1}
        assert not np.any(r.nucleus_mask & r.cytoplasm_mask)
        assert r.nucleus_mask.shape == r.cytoplasm_mask.shape == r.rgb.shape[:2]


def test_synthetic_deterministic(tmp_path):
    spec = SyntheticSpec(n_cells=12, image_size=32, seed=1)
    generate_synthetic(tmp_path / "a", spec)
    generate_synthetic(tmp_path / "b", spec)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synthetic_two_classes_ratio_rule(tmp_path):
    spec = SyntheticSpec(n_cells=100, image_size=40, n_classes=2, threshold=0.3, seed=5)
    m = generate_synthetic(tmp_path, spec)
    assert len(m) == 100
    assert len(set(m.labels.tolist())) == 2
    reloaded = load_manifest(tmp_path / "manifest.csv")
    for entry in reloaded:
        seg = np.asarray(Image.open(tmp_path / entry.segmentation).convert("RGB"))
        nucleus = np.all(seg == 255, axis=-1).sum()
        cyto = np.all(seg == 128, axis=-1).sum()
        expected = 4 if nucleus / cyto > 0.3 else 1
        assert entry.class_label == expected


def test_synthetic_ratio_darkness_rule(tmp_path):
    spec = SyntheticSpec(n_cells=40, image_size=40, n_classes=4, rule="ratio+darkness", seed=2)
    m = generate_synthetic(tmp_path, spec)
    assert set(m.labels.tolist()) <= {1, 2, 3, 4}
    assert len(set(m.labels.tolist())) >= 3


def test_synthetic_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ManifestError):
        generate_synthetic(blocker / "sub", SyntheticSpec(n_cells=1))


def test_decode_all_parallel_matches_serial(synth_records):
    manifest, records = synth_records
    par = decode_all(manifest, workers=4)
    assert [r.index for r in par] == list(range(len(manifest)))
    for a, b in zip(records, par):
        assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.nucleus_mask, b.nucleus_mask)


def test_manifest_roundtrip(tmp_path, synth_records):
    manifest, _ = synth_records
    write_manifest(manifest, tmp_path / "copy.csv")
    again = load_manifest(tmp_path / "copy.csv", check_files=False)
    assert again.entries == manifest.entries
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_manifest(tmp_path / "copy.csv", check_files=False)
    assert isinstance(again, DatasetManifest)
