"""
Transition-line extraction: Canny edges and Frangi ridges as binary maps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import ndimage
from skimage.feature import hessian_matrix, hessian_matrix_eigvals
from skimage.filters import threshold_otsu

FeatureSource = Literal["canny", "frangi", "synthetic-truth", "overlay"]

CANNY_SIGMA = 1.5
CANNY_LOW_PERCENTILE = 70.0
CANNY_HIGH_PERCENTILE = 90.0

FRANGI_SIGMAS = (1.0, 1.5, 2.0)
FRANGI_BETA = 0.5

# Overlay classes, stored as pixel values so overlays fit the CSD1 container
OVERLAY_MATCHED = 1.0
OVERLAY_SPURIOUS = 2.0 / 3.0
OVERLAY_MISSED = 1.0 / 3.0


@dataclass(frozen=True, slots=True)
class BinaryFeatureMap:
    bits: np.ndarray  # bool (H, W), True = transition-line pixel
    source: FeatureSource

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape


# Canny

# offsets (di, dj) of the neighbor along the gradient, per quantized direction
_NMS_OFFSETS = ((0, 1), (1, 1), (1, 0), (1, -1))


def _shifted(a: np.ndarray, di: int, dj: int) -> np.ndarray:
    """a[i + di, j + dj] with zero fill outside the frame."""
    out = np.zeros_like(a)
    h, w = a.shape
    src_i = slice(max(di, 0), h + min(di, 0))
    dst_i = slice(max(-di, 0), h + min(-di, 0))
    src_j = slice(max(dj, 0), w + min(dj, 0))
    dst_j = slice(max(-dj, 0), w + min(-dj, 0))
    out[dst_i, dst_j] = a[src_i, src_j]
    return out


def gradient_magnitude(image: np.ndarray, sigma: float = CANNY_SIGMA) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    smoothed = ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), sigma, mode="nearest")
    grad_i = ndimage.sobel(smoothed, axis=0, mode="nearest")
    grad_j = ndimage.sobel(smoothed, axis=1, mode="nearest")
    return np.hypot(grad_i, grad_j), grad_i, grad_j


def canny_edges(image: np.ndarray, sigma: float = CANNY_SIGMA) -> BinaryFeatureMap:
    """
    Gaussian smoothing, Sobel gradients, non-maximum suppression and
    hysteresis with thresholds at the 70th / 90th percentile of the nonzero
    gradient magnitudes.
    """
    magnitude, grad_i, grad_j = gradient_magnitude(image, sigma)
    if not np.any(magnitude > 0):
        return BinaryFeatureMap(np.zeros(magnitude.shape, dtype=bool), "canny")

    # quantize the gradient direction to 0, 45, 90, 135 degrees
    angle = np.mod(np.degrees(np.arctan2(grad_i, grad_j)), 180.0)
    sector = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4

    thinned = np.zeros(magnitude.shape, dtype=bool)
    for s, (di, dj) in enumerate(_NMS_OFFSETS):
        ahead = _shifted(magnitude, di, dj)
        behind = _shifted(magnitude, -di, -dj)
        # >= on one side, > on the other: a plateau of equal maxima keeps one pixel
        keep = (magnitude >= ahead) & (magnitude > behind)
        thinned |= keep & (sector == s)
    thinned &= magnitude > 0

    nonzero = magnitude[magnitude > 0]
    low = np.percentile(nonzero, CANNY_LOW_PERCENTILE)
    high = np.percentile(nonzero, CANNY_HIGH_PERCENTILE)
    strong = thinned & (magnitude >= high)
    weak = thinned & (magnitude >= low)
    edges = ndimage.binary_dilation(strong, structure=np.ones((3, 3), dtype=bool), iterations=-1, mask=weak)
    return BinaryFeatureMap(edges, "canny")


# Frangi


def vesselness(
    image: np.ndarray,
    sigmas: tuple[float, ...] = FRANGI_SIGMAS,
    beta: float = FRANGI_BETA,
) -> np.ndarray:
    """
    Multiscale Frangi response for bright ridges.

    Per scale: Hessian eigenvalues |l1| <= |l2|, R_B = l1 / l2,
    S = sqrt(l1^2 + l2^2), c = max(S) / 2; the response is zero where l2 >= 0.
    The maximum over scales is returned.
    """
    img = np.asarray(image, dtype=np.float64)
    response = np.zeros(img.shape, dtype=np.float64)
    for sigma in sigmas:
        elems = hessian_matrix(img, sigma=sigma, mode="reflect", order="rc", use_gaussian_derivatives=False)
        eig = hessian_matrix_eigvals(elems)  # (2, H, W), descending
        swap = np.abs(eig[0]) > np.abs(eig[1])
        lam1 = np.where(swap, eig[1], eig[0])
        lam2 = np.where(swap, eig[0], eig[1])

        structure = np.sqrt(lam1**2 + lam2**2)
        c = structure.max() / 2.0
        if c <= 0:
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            r_b = np.where(lam2 != 0, lam1 / lam2, 0.0)
        v = np.exp(-(r_b**2) / (2.0 * beta**2)) * (1.0 - np.exp(-(structure**2) / (2.0 * c**2)))
        v[lam2 >= 0] = 0.0
        np.maximum(response, v, out=response)
    return response


def frangi_ridges(
    image: np.ndarray,
    sigmas: tuple[float, ...] = FRANGI_SIGMAS,
    beta: float = FRANGI_BETA,
) -> BinaryFeatureMap:
    """Frangi response binarized with Otsu's threshold over its nonzero values."""
    response = vesselness(image, sigmas, beta)
    nonzero = response[response > 0]
    if nonzero.size == 0 or np.ptp(nonzero) == 0:
        return BinaryFeatureMap(np.zeros(response.shape, dtype=bool), "frangi")
    return BinaryFeatureMap(response > threshold_otsu(nonzero), "frangi")


# Tolerance helpers


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    ii, jj = np.mgrid[-r : r + 1, -r : r + 1]
    return ii * ii + jj * jj <= r * r


def dilate(bits: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return bits.copy()
    return ndimage.binary_dilation(bits, structure=disk(radius))


def ridge_overlay(pred: BinaryFeatureMap, truth: BinaryFeatureMap, radius: int = 1) -> np.ndarray:
    """
    Per-pixel class raster: matched (prediction near truth), spurious
    (prediction away from truth) and missed (truth away from prediction).
    """
    near_truth = dilate(truth.bits, radius)
    near_pred = dilate(pred.bits, radius)
    overlay = np.zeros(pred.shape, dtype=np.float32)
    overlay[truth.bits & ~near_pred] = OVERLAY_MISSED
    overlay[pred.bits & ~near_truth] = OVERLAY_SPURIOUS
    overlay[pred.bits & near_truth] = OVERLAY_MATCHED
    return overlay
