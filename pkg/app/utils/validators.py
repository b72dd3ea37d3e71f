from typing import Any, Dict, Iterable, List

import numpy as np
import pandas as pd

from app.core.exceptions import DataLeakError


# Configuration

METRIC_BOUNDS = {
    "iou_ridge": (0.0, 1.0),
    "f1_ridge": (0.0, 1.0),
    "iou_edge": (0.0, 1.0),
    "f1_edge": (0.0, 1.0),
    "ssim": (-1.0, 1.0),
    "hausdorff_ridge": (0.0, np.inf),
    "hausdorff_edge": (0.0, np.inf),
    "rnmse": (0.0, np.inf),
}


def _violation(kind: str, severity: str, message: str, **extra: Any) -> Dict[str, Any]:
    return {"type": kind, "severity": severity, "message": message, **extra}


# Validation Functions


def validate_reconstruction(recon: np.ndarray, y: np.ndarray, mask: np.ndarray) -> Dict[str, Any]:
    """
    Check a reconstruction against its measurement.

    Returns:
        {"valid": bool, "violations": [...], "stats": {...}}
    """
    violations = []
    bits = np.asarray(mask, dtype=bool)
    stats = {"shape": tuple(recon.shape), "n_measured": int(bits.sum())}

    if recon.shape != y.shape or bits.shape != y.shape:
        violations.append(
            _violation("shape", "error", f"shapes differ: recon {recon.shape}, y {y.shape}, mask {bits.shape}")
        )
        return {"valid": False, "violations": violations, "stats": stats}

    n_bad = int(np.count_nonzero(~np.isfinite(recon)))
    if n_bad:
        violations.append(_violation("non_finite", "error", f"{n_bad} non-finite pixels"))

    mismatched = int(np.count_nonzero(recon[bits] != y[bits]))
    stats["measured_mismatch"] = mismatched
    if mismatched:
        violations.append(
            _violation("measured_mismatch", "error", f"{mismatched} measured pixels differ from the measurement")
        )

    lo, hi = float(np.nanmin(recon)), float(np.nanmax(recon))
    stats["range"] = (lo, hi)
    if lo < -0.5 or hi > 1.5:
        violations.append(_violation("range", "warning", f"values span [{lo:.3f}, {hi:.3f}], far outside [0, 1]"))

    return {
        "valid": not any(v["severity"] == "error" for v in violations),
        "violations": violations,
        "stats": stats,
    }


def validate_split(train_ids: Iterable[str], val_ids: Iterable[str], test_ids: Iterable[str]) -> Dict[str, Any]:
    buckets = {"train": list(train_ids), "val": list(val_ids), "test": list(test_ids)}
    violations = []
    for name, ids in buckets.items():
        if len(set(ids)) != len(ids):
            violations.append(_violation("duplicate_id", "error", f"duplicate ids in {name}"))

    pairs = [("train", "val"), ("train", "test"), ("val", "test")]
    for a, b in pairs:
        shared = set(buckets[a]) & set(buckets[b])
        if shared:
            violations.append(
                _violation("overlap", "error", f"{len(shared)} ids in both {a} and {b}", ids=sorted(shared)[:5])
            )

    return {
        "valid": not violations,
        "violations": violations,
        "stats": {name: len(ids) for name, ids in buckets.items()},
    }


def assert_no_test_leak(batch_ids: Iterable[str], test_ids: Iterable[str]) -> None:
    leaked = set(batch_ids) & set(test_ids)
    if leaked:
        raise DataLeakError(f"test ids reached training: {sorted(leaked)[:5]}")


def validate_metric_table(per_image: pd.DataFrame, group_by: List[str]) -> Dict[str, Any]:
    """Range checks per metric and min <= mean <= max, std >= 0 per cell."""
    violations = []
    for column, (lo, hi) in METRIC_BOUNDS.items():
        if column not in per_image:
            continue
        values = per_image[column].to_numpy(dtype=np.float64)
        finite = values[np.isfinite(values)]
        tol = 1e-9
        if finite.size and (finite.min() < lo - tol or finite.max() > hi + tol):
            violations.append(
                _violation(
                    "metric_range",
                    "error",
                    f"{column} outside [{lo}, {hi}]: [{finite.min():.4g}, {finite.max():.4g}]",
                )
            )

    if not per_image.empty:
        metrics = [c for c in METRIC_BOUNDS if c in per_image]
        grouped = per_image.groupby(group_by, sort=True)[metrics]
        summary = grouped.agg(["min", "mean", "max", "std"])
        for column in metrics:
            cell = summary[column].dropna()
            bad = cell[(cell["mean"] < cell["min"] - 1e-12) | (cell["mean"] > cell["max"] + 1e-12)]
            if len(bad):
                violations.append(_violation("aggregate_order", "error", f"{column}: mean outside [min, max]"))
            if (cell["std"] < 0).any():
                violations.append(_violation("aggregate_std", "error", f"{column}: negative std"))

    return {
        "valid": not any(v["severity"] == "error" for v in violations),
        "violations": violations,
        "stats": {"rows": int(len(per_image))},
    }


def format_validation_report(validation_result: Dict[str, Any], title: str = "VALIDATION REPORT") -> str:
    """Human-readable validation report."""
    lines = ["=" * 70, title, "=" * 70]
    for key, value in validation_result["stats"].items():
        lines.append(f"   {key}: {value}")

    violations = validation_result["violations"]
    if not violations:
        lines.append("✅ VALID - No violations found")
    else:
        errors = [v for v in violations if v["severity"] == "error"]
        warnings = [v for v in violations if v["severity"] == "warning"]
        lines.append(f"⚠️  Found {len(errors)} errors, {len(warnings)} warnings")
        for v in errors:
            lines.append(f"   ❌ {v['message']}")
        for v in warnings:
            lines.append(f"   ⚠️  {v['message']}")
    lines.append("=" * 70)
    return "\n".join(lines)
