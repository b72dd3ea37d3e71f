import numpy as np
import pytest

from app.core.exceptions import CsdFormatError, InsufficientDataError
from app.services.csd_data import ChargeStabilityDiagram, import_csv, make_splits, normalize


def test_normalize_min_max():
    out = normalize(np.array([[0.0, 10.0]]))
    assert out.dtype == np.float32
    assert np.array_equal(out, [[0.0, 1.0]])


def test_normalize_constant_maps_to_half():
    assert np.all(normalize(np.full((3, 3), 7.0)) == 0.5)


def test_normalize_is_idempotent():
    raw = np.random.default_rng(0).normal(size=(16, 16))
    once = normalize(raw)
    assert once.min() == 0.0 and once.max() == 1.0
    assert np.allclose(normalize(once), once, atol=1e-7)


def test_normalize_rejects_non_finite():
    with pytest.raises(CsdFormatError):
        normalize(np.array([0.0, np.inf]))


def test_import_csv(tmp_path):
    path = tmp_path / "device.csv"
    path.write_text("0,1\n2,3\n")
    csd = import_csv(path, (-1.0, 1.0), (0.0, 2.0))
    assert csd.id == "device"
    assert csd.v1_range == (-1.0, 1.0)
    assert np.allclose(csd.pixels, [[0.0, 1 / 3], [2 / 3, 1.0]])


def test_import_csv_with_header(tmp_path):
    path = tmp_path / "with_header.csv"
    path.write_text("V1,V2\n0,1\n2,3\n")
    assert import_csv(path).shape == (2, 2)


def test_import_constant_csv(tmp_path):
    path = tmp_path / "flat.csv"
    path.write_text("4,4\n4,4\n")
    assert np.all(import_csv(path).pixels == 0.5)


def test_import_ragged_csv(tmp_path):
    path = tmp_path / "ragged.csv"
    path.write_text("1,2\n3\n")
    with pytest.raises(CsdFormatError):
        import_csv(path)


def test_import_non_numeric_cell(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("0,1\n2,x\n")
    with pytest.raises(CsdFormatError):
        import_csv(path)


def test_csd_rejects_non_finite_pixels():
    with pytest.raises(CsdFormatError):
        ChargeStabilityDiagram(pixels=np.array([[0.0, np.nan]], dtype=np.float32))


def test_make_splits_full_dataset_counts():
    ids = [f"csd-{i:05d}" for i in range(9870)]
    split = make_splits(ids, seed=0)
    assert (len(split.test_ids), len(split.train_ids), len(split.val_ids)) == (20, 8865, 985)
    buckets = [set(split.train_ids), set(split.val_ids), set(split.test_ids)]
    assert sum(len(b) for b in buckets) == len(ids)
    assert set().union(*buckets) == set(ids)
    print("✅ 9870 ids split into 8865 / 985 / 20")


def test_make_splits_is_deterministic_and_seeded():
    ids = [f"id{i}" for i in range(100)]
    a, b, c = make_splits(ids, seed=3), make_splits(ids, seed=3), make_splits(ids, seed=4)
    assert a.train_ids == b.train_ids and a.test_ids == b.test_ids
    assert a.test_ids != c.test_ids


def test_make_splits_pinned_test_ids():
    ids = [f"id{i}" for i in range(40)]
    split = make_splits(ids, seed=0, test_ids=["id1", "id2"])
    assert split.test_ids == ["id1", "id2"]
    assert "id1" not in split.train_ids + split.val_ids


def test_make_splits_needs_enough_ids():
    with pytest.raises(InsufficientDataError):
        make_splits([f"id{i}" for i in range(29)], seed=0)
