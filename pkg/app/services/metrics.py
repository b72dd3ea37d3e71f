from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import pandas as pd
from scipy import ndimage
from skimage.metrics import structural_similarity

from app.core.config import settings
from app.core.exceptions import MetricUndefinedError, ShapeMismatchError
from app.services.features import BinaryFeatureMap, canny_edges, dilate, frangi_ridges

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
F1_TOLERANCE_PX = 1


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shapes differ: {a.shape} vs {b.shape}")


# Pixel metrics


def rnmse(pred: np.ndarray, truth: np.ndarray) -> float:
    """RMSE normalized by the standard deviation of the ground truth."""
    _same_shape(pred, truth)
    truth64 = np.asarray(truth, dtype=np.float64)
    std = float(truth64.std())
    if std == 0:
        raise MetricUndefinedError("rNMSE is undefined for a constant ground truth")
    rmse = math.sqrt(float(np.mean((np.asarray(pred, dtype=np.float64) - truth64) ** 2)))
    return rmse / std


def psnr(pred: np.ndarray, truth: np.ndarray, data_range: float = 1.0) -> float:
    """PSNR in dB; identical images report the ``PSNR_CAP_DB`` sentinel."""
    _same_shape(pred, truth)
    err = float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)) ** 2))
    if err == 0:
        return settings.PSNR_CAP_DB
    return 10.0 * math.log10(data_range**2 / err)


def ssim(pred: np.ndarray, truth: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM, 11x11 Gaussian window with sigma 1.5, K1 = 0.01, K2 = 0.03."""
    _same_shape(pred, truth)
    if min(pred.shape) < SSIM_WINDOW:
        raise MetricUndefinedError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {pred.shape}")
    return float(
        structural_similarity(
            np.asarray(pred, dtype=np.float64),
            np.asarray(truth, dtype=np.float64),
            data_range=data_range,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            win_size=SSIM_WINDOW,
            use_sample_covariance=False,
            K1=SSIM_K1,
            K2=SSIM_K2,
        )
    )


# Structure metrics


def iou(a: BinaryFeatureMap, b: BinaryFeatureMap) -> float:
    _same_shape(a.bits, b.bits)
    union = np.count_nonzero(a.bits | b.bits)
    if union == 0:
        return 1.0
    return np.count_nonzero(a.bits & b.bits) / union


def precision_recall(pred: BinaryFeatureMap, truth: BinaryFeatureMap, tolerance: int = F1_TOLERANCE_PX) -> tuple[float, float]:
    _same_shape(pred.bits, truth.bits)
    n_pred, n_truth = pred.count, truth.count
    precision = np.count_nonzero(pred.bits & dilate(truth.bits, tolerance)) / n_pred if n_pred else 0.0
    recall = np.count_nonzero(truth.bits & dilate(pred.bits, tolerance)) / n_truth if n_truth else 0.0
    return precision, recall


def f1(pred: BinaryFeatureMap, truth: BinaryFeatureMap, tolerance: int = F1_TOLERANCE_PX) -> float:
    """F1 with a dilation tolerance of ``tolerance`` px; two empty maps score 1."""
    if pred.count == 0 and truth.count == 0:
        return 1.0
    precision, recall = precision_recall(pred, truth, tolerance)
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def hausdorff(a: BinaryFeatureMap, b: BinaryFeatureMap) -> float:
    """Symmetric Hausdorff distance in pixels, from Euclidean distance transforms."""
    _same_shape(a.bits, b.bits)
    if a.count == 0 or b.count == 0:
        raise MetricUndefinedError("Hausdorff distance is undefined for an empty feature map")
    to_b = ndimage.distance_transform_edt(~b.bits)
    to_a = ndimage.distance_transform_edt(~a.bits)
    return float(max(to_b[a.bits].max(), to_a[b.bits].max()))


# Reports


@dataclass(slots=True)
class MetricReport:
    """Per-image metric values; NaN marks a metric that is undefined for the image."""

    rnmse: float = math.nan
    psnr: float = math.nan
    ssim: float = math.nan
    iou_ridge: float = math.nan
    f1_ridge: float = math.nan
    hausdorff_ridge: float = math.nan
    iou_edge: float = math.nan
    f1_edge: float = math.nan
    hausdorff_edge: float = math.nan

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass(slots=True)
class EvaluatedImage:
    report: MetricReport
    errors: list[str]
    pred_ridges: BinaryFeatureMap
    truth_ridges: BinaryFeatureMap


def evaluate_image(
    pred: np.ndarray,
    truth: np.ndarray,
    tolerance: int = F1_TOLERANCE_PX,
    truth_ridges: BinaryFeatureMap | None = None,
    truth_edges: BinaryFeatureMap | None = None,
) -> EvaluatedImage:
    """
    Every metric for one reconstruction. Undefined metrics are recorded as NaN
    with a message instead of aborting the image.
    """
    _same_shape(pred, truth)
    report = MetricReport()
    errors: list[str] = []

    def record(name: str, fn, *args) -> None:
        try:
            setattr(report, name, float(fn(*args)))
        except MetricUndefinedError as e:
            errors.append(f"{name}: {e}")

    record("rnmse", rnmse, pred, truth)
    record("psnr", psnr, pred, truth)
    record("ssim", ssim, pred, truth)

    if truth_ridges is None:
        truth_ridges = frangi_ridges(truth)
    if truth_edges is None:
        truth_edges = canny_edges(truth)
    pred_ridges = frangi_ridges(pred)
    pred_edges = canny_edges(pred)

    record("iou_ridge", iou, pred_ridges, truth_ridges)
    record("f1_ridge", f1, pred_ridges, truth_ridges, tolerance)
    record("hausdorff_ridge", hausdorff, pred_ridges, truth_ridges)
    record("iou_edge", iou, pred_edges, truth_edges)
    record("f1_edge", f1, pred_edges, truth_edges, tolerance)
    record("hausdorff_edge", hausdorff, pred_edges, truth_edges)

    return EvaluatedImage(report=report, errors=errors, pred_ridges=pred_ridges, truth_ridges=truth_ridges)


AGGREGATE_STATS = ("mean", "std", "min", "max", "n")


def aggregate(reports: list[MetricReport]) -> dict[str, float]:
    """Mean, population std, min and max of every metric over the finite per-image values."""
    frame = pd.DataFrame([r.as_dict() for r in reports], columns=MetricReport.names())
    summary: dict[str, float] = {}
    for name in MetricReport.names():
        column = frame[name].to_numpy(dtype=np.float64)
        finite = column[np.isfinite(column)]
        if finite.size:
            summary[f"{name}_mean"] = float(finite.mean())
            summary[f"{name}_std"] = float(finite.std())
            summary[f"{name}_min"] = float(finite.min())
            summary[f"{name}_max"] = float(finite.max())
        else:
            for stat in AGGREGATE_STATS[:-1]:
                summary[f"{name}_{stat}"] = math.nan
        summary[f"{name}_n"] = int(finite.size)
    return summary
