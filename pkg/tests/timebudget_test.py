import math

import numpy as np
import pytest

from app.services.masking import make_mask
from app.services.timebudget import reference_inference_time, sweep, time_to_reconstruct


def test_full_scan_reference():
    budget = time_to_reconstruct(16384, t_p=25e-6, t_d=0.0)
    assert abs(budget.total - 0.4096) < 1e-9


def test_sparse_grid_with_inference_reference():
    mask = make_mask(128, 128, "grid:5")
    assert mask.n_measured == 676
    budget = time_to_reconstruct(mask, t_p=25e-6, t_d=reference_inference_time(20))
    assert abs(budget.total - 0.0369) < 1e-9
    assert abs(budget.full_scan - 0.4096) < 1e-9
    assert budget.speedup == pytest.approx(0.4096 / 0.0369)
    print(f"✅ grid:5 + 20 steps: {budget.total:.4f} s, {budget.speedup:.1f}x faster than a full scan")


def test_reference_inference_scales_with_steps():
    assert reference_inference_time(0) == 0.0
    assert reference_inference_time(20) == pytest.approx(0.02)
    assert reference_inference_time(140) == pytest.approx(0.14)
    with pytest.raises(ValueError):
        reference_inference_time(-1)


def test_zero_budget():
    budget = time_to_reconstruct(0, t_p=25e-6, t_d=0.0)
    assert budget.total == 0.0
    assert budget.speedup == 1.0
    assert math.isinf(time_to_reconstruct(0, t_p=25e-6, full_pixels=100).speedup)


def test_negative_inputs_are_rejected():
    with pytest.raises(ValueError):
        time_to_reconstruct(-1)
    with pytest.raises(ValueError):
        time_to_reconstruct(10, t_p=-1e-6)
    with pytest.raises(ValueError):
        time_to_reconstruct(10, t_d=-0.1)


def test_total_is_monotone_in_every_input():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n_p = int(rng.integers(0, 20000))
        t_p = float(rng.uniform(0, 1e-3))
        t_d = float(rng.uniform(0, 1.0))
        base = time_to_reconstruct(n_p, t_p, t_d).total
        assert time_to_reconstruct(n_p + int(rng.integers(0, 100)), t_p, t_d).total >= base
        assert time_to_reconstruct(n_p, t_p + float(rng.uniform(0, 1e-4)), t_d).total >= base
        assert time_to_reconstruct(n_p, t_p, t_d + float(rng.uniform(0, 0.1))).total >= base


def test_sweep_table():
    table = sweep(["grid:5", "lc:4-4-1-1:random"], steps=[20, 60], shape=(64, 64))
    assert len(table) == 2 * 3
    assert set(table["steps"]) == {0, 20, 60}
    grid = table[table["mask"] == "grid:5"].set_index("steps")
    assert grid.loc[0, "t_d"] == 0.0
    assert grid.loc[60, "total"] > grid.loc[20, "total"] > grid.loc[0, "total"]

    again = sweep(["lc:4-4-1-1:random"], steps=[20], shape=(64, 64))
    assert again["n_p"].tolist() == table[table["mask"] == "lc:4-4-1-1:random"]["n_p"].tolist()[:2]
