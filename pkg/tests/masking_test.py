import math

import numpy as np
import pytest

from app.core.exceptions import MaskSpecError
from app.services.masking import (
    GridMaskSpec,
    LineCutSpec,
    apply_mask,
    density,
    expected_measured_count,
    make_grid_mask,
    make_line_cut_mask,
    make_mask,
    parse_mask_spec,
)

FRAME = 128 * 128


@pytest.mark.parametrize("n, count", [(3, 1849), (5, 676), (7, 361), (9, 225)])
def test_grid_mask_counts(n, count):
    mask = make_grid_mask(128, 128, n)
    assert mask.n_measured == count
    assert density(mask) == count / FRAME
    assert mask.bits[0, 0], "grid is anchored at index 0"


@pytest.mark.parametrize(
    "spec, count, rounded",
    [
        ("lc:8-8-4-4", 7168, 0.4375),
        ("lc:6-6-4-4", 5568, 0.3398),
        ("lc:4-4-8-8", 7168, 0.4375),
        ("lc:4-4-4-4", 3840, 0.2344),
    ],
)
def test_line_cut_counts(spec, count, rounded):
    mask = make_mask(128, 128, spec)
    assert mask.n_measured == count
    assert round(density(mask), 4) == rounded
    assert expected_measured_count(128, 128, mask.spec) == count


def test_equal_density_different_layout():
    a = make_mask(128, 128, "lc:8-8-4-4")
    b = make_mask(128, 128, "lc:4-4-8-8")
    assert a.n_measured == b.n_measured
    assert not np.array_equal(a.bits, b.bits)


def test_line_cut_band_placement():
    mask = make_line_cut_mask(128, 128, LineCutSpec(8, 8, 4, 4))
    rows = np.flatnonzero(mask.bits.all(axis=1))
    # first band centered at floor(0.5 * 16) = 8, spanning 6..9
    assert list(rows[:4]) == [6, 7, 8, 9]
    assert len(rows) == 32


def test_grid_density_formula_holds_for_random_shapes():
    rng = np.random.default_rng(0)
    for _ in range(200):
        h, w = (int(v) for v in rng.integers(1, 80, size=2))
        n = int(rng.integers(1, min(h, w) + 1))
        mask = make_grid_mask(h, w, n)
        assert mask.n_measured == math.ceil(h / n) * math.ceil(w / n)


def test_line_cut_inclusion_exclusion_matches_popcount():
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 200:
        h, w = (int(v) for v in rng.integers(4, 96, size=2))
        spec = LineCutSpec(*(int(v) for v in rng.integers(0, 9, size=2)), *(int(v) for v in rng.integers(0, 7, size=2)))
        try:
            mask = make_line_cut_mask(h, w, spec)
        except MaskSpecError:
            continue
        assert mask.n_measured == expected_measured_count(h, w, spec)
        checked += 1


def test_masks_are_deterministic():
    a = make_mask(64, 64, "lc:3-5-2-1")
    b = make_mask(64, 64, "lc:3-5-2-1")
    assert np.array_equal(a.bits, b.bits)


def test_randomized_line_cut_is_seeded():
    spec = parse_mask_spec("lc:8-8-4-4:random")
    assert spec.randomized and spec.label == "lc:8-8-4-4:random"
    a = make_mask(128, 128, spec, rng=np.random.default_rng(3))
    b = make_mask(128, 128, spec, rng=np.random.default_rng(3))
    c = make_mask(128, 128, spec, rng=np.random.default_rng(4))
    assert np.array_equal(a.bits, b.bits)
    assert not np.array_equal(a.bits, c.bits)
    # bands stay inside their slots, so they never overlap
    assert a.n_measured == 7168

    with pytest.raises(MaskSpecError):
        make_mask(128, 128, spec)


def test_parse_mask_spec():
    assert parse_mask_spec("grid:5") == GridMaskSpec(5)
    assert parse_mask_spec(" LC:8-8-4-4 ") == LineCutSpec(8, 8, 4, 4)
    for bad in ["grid", "grid:x", "lc:1-2-3", "ray:4"]:
        with pytest.raises(MaskSpecError):
            parse_mask_spec(bad)


def test_invalid_specs_rejected():
    with pytest.raises(MaskSpecError):
        make_grid_mask(16, 16, 0)
    with pytest.raises(MaskSpecError):
        make_line_cut_mask(16, 16, LineCutSpec(5, 0, 4, 0))
    with pytest.raises(MaskSpecError):
        make_line_cut_mask(16, 16, LineCutSpec(0, 0, 0, 0))


def test_apply_mask_zeroes_unmeasured():
    pixels = np.random.default_rng(2).uniform(0.1, 1.0, size=(32, 32)).astype(np.float32)
    mask = make_mask(32, 32, "grid:4")
    y = apply_mask(pixels, mask)
    assert y.dtype == np.float32
    assert np.array_equal(y[mask.bits], pixels[mask.bits])
    assert np.all(y[~mask.bits] == 0)


def test_full_mask_density():
    assert density(make_grid_mask(16, 16, 1)) == 1.0
