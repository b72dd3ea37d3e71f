import numpy as np
import pandas as pd
import pytest

from app.core.exceptions import DataLeakError
from app.utils.validators import (
    assert_no_test_leak,
    format_validation_report,
    validate_metric_table,
    validate_reconstruction,
    validate_split,
)


def test_valid_reconstruction():
    y = np.zeros((4, 4))
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, 0] = True
    y[0, 0] = 0.3
    recon = np.full((4, 4), 0.5)
    recon[0, 0] = 0.3

    result = validate_reconstruction(recon, y, mask)
    assert result["valid"]
    assert result["stats"]["n_measured"] == 1
    assert "✅ VALID" in format_validation_report(result)


def test_reconstruction_violations():
    y = np.zeros((4, 4))
    mask = np.ones((4, 4), dtype=bool)
    recon = np.zeros((4, 4))
    recon[1, 1] = np.nan
    recon[2, 2] = 3.0

    result = validate_reconstruction(recon, y, mask)
    kinds = {v["type"] for v in result["violations"]}
    assert not result["valid"]
    assert {"non_finite", "measured_mismatch", "range"} <= kinds
    report = format_validation_report(result, "RECON")
    assert "❌" in report and "RECON" in report

    shape = validate_reconstruction(np.zeros((3, 3)), y, mask)
    assert not shape["valid"] and shape["violations"][0]["type"] == "shape"


def test_validate_split():
    assert validate_split(["a", "b"], ["c"], ["d"])["valid"]
    result = validate_split(["a", "b"], ["b"], ["a", "a"])
    kinds = [v["type"] for v in result["violations"]]
    assert not result["valid"]
    assert "duplicate_id" in kinds and kinds.count("overlap") == 2


def test_assert_no_test_leak():
    assert_no_test_leak(["a", "b"], ["c"])
    with pytest.raises(DataLeakError):
        assert_no_test_leak(["a", "c"], ["c"])


def test_validate_metric_table():
    frame = pd.DataFrame(
        {
            "method": ["idw", "idw", "linear"],
            "mask": ["grid:4"] * 3,
            "steps": [0, 0, 0],
            "iou_ridge": [0.2, 0.4, np.nan],
            "rnmse": [0.1, 0.3, 0.2],
        }
    )
    assert validate_metric_table(frame, ["method", "mask", "steps"])["valid"]

    frame.loc[0, "iou_ridge"] = 1.5
    result = validate_metric_table(frame, ["method", "mask", "steps"])
    assert not result["valid"]
    assert result["violations"][0]["type"] == "metric_range"
