"""
Measurement masks: which voltage points of a CSD are actually acquired.

Two protocols are supported:
  - grid masks, measuring 1 out of every n points along each axis
  - line-cut masks, sweeping N_h horizontal and N_v vertical bands of
    thickness T_h / T_v pixels
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

import numpy as np

from app.core.exceptions import MaskSpecError, ShapeMismatchError


@dataclass(frozen=True, slots=True)
class GridMaskSpec:
    reduce_factor: int

    @property
    def label(self) -> str:
        return f"grid:{self.reduce_factor}"


@dataclass(frozen=True, slots=True)
class LineCutSpec:
    n_h: int
    n_v: int
    t_h: int
    t_v: int
    randomized: bool = False  # seeded random offsets instead of even spacing

    @property
    def label(self) -> str:
        base = f"lc:{self.n_h}-{self.n_v}-{self.t_h}-{self.t_v}"
        return f"{base}:random" if self.randomized else base


MaskSpec = Union[GridMaskSpec, LineCutSpec]


@dataclass(frozen=True, slots=True)
class MeasurementMask:
    bits: np.ndarray  # bool (H, W), True = measured
    spec: MaskSpec

    @property
    def n_measured(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape


_GRID_RE = re.compile(r"^grid:(\d+)$")
_LC_RE = re.compile(r"^lc:(\d+)-(\d+)-(\d+)-(\d+)(:random)?$")


def parse_mask_spec(text: str) -> MaskSpec:
    """Parse ``grid:n`` or ``lc:nh-nv-th-tv[:random]``."""
    value = text.strip().lower()
    if m := _GRID_RE.match(value):
        return GridMaskSpec(int(m.group(1)))
    if m := _LC_RE.match(value):
        n_h, n_v, t_h, t_v = (int(g) for g in m.groups()[:4])
        return LineCutSpec(n_h, n_v, t_h, t_v, randomized=m.group(5) is not None)
    raise MaskSpecError(f"Unrecognized mask spec '{text}' (expected grid:n or lc:nh-nv-th-tv)")


def _validate_line_cut(h: int, w: int, spec: LineCutSpec) -> None:
    if min(spec.n_h, spec.n_v, spec.t_h, spec.t_v) < 0:
        raise MaskSpecError(f"{spec.label}: counts and thicknesses must be >= 0")
    if spec.n_h * spec.t_h > h or spec.n_v * spec.t_v > w:
        raise MaskSpecError(f"{spec.label}: sweeps do not fit a {h}x{w} frame")
    if spec.n_h * spec.t_h + spec.n_v * spec.t_v == 0:
        raise MaskSpecError(f"{spec.label}: at least one non-empty sweep is required")


def _band_indices(
    size: int, count: int, thickness: int, rng: np.random.Generator | None
) -> np.ndarray:
    """Sorted unique pixel indices covered by ``count`` bands along one axis."""
    if count == 0 or thickness == 0:
        return np.empty(0, dtype=np.int64)
    centers = np.floor((np.arange(count) + 0.5) * size / count).astype(np.int64)
    if rng is not None:
        slack = max(0, (size // count - thickness) // 2)
        centers = centers + rng.integers(-slack, slack + 1, size=count)
    offsets = np.arange(thickness) - thickness // 2
    idx = (centers[:, None] + offsets[None, :]).ravel()
    return np.unique(idx[(idx >= 0) & (idx < size)])


def make_grid_mask(h: int, w: int, reduce_factor: int) -> MeasurementMask:
    n = int(reduce_factor)
    if not 1 <= n <= min(h, w):
        raise MaskSpecError(f"reduce factor {n} out of range [1, {min(h, w)}]")
    bits = np.zeros((h, w), dtype=bool)
    bits[::n, ::n] = True
    return MeasurementMask(bits=bits, spec=GridMaskSpec(n))


def make_line_cut_mask(
    h: int, w: int, spec: LineCutSpec, rng: np.random.Generator | None = None
) -> MeasurementMask:
    """
    Union of horizontal and vertical sweeps.

    Sweep k is centered at floor((k + 0.5) * size / count) and spans ``t``
    pixels starting ``t // 2`` before the center, clipped to the frame. With
    ``spec.randomized`` each center is shifted within its slot using ``rng``.
    """
    _validate_line_cut(h, w, spec)
    if spec.randomized and rng is None:
        raise MaskSpecError(f"{spec.label}: randomized line cuts need a random generator")
    jitter = rng if spec.randomized else None
    bits = np.zeros((h, w), dtype=bool)
    bits[_band_indices(h, spec.n_h, spec.t_h, jitter), :] = True
    bits[:, _band_indices(w, spec.n_v, spec.t_v, jitter)] = True
    return MeasurementMask(bits=bits, spec=spec)


def make_mask(
    h: int, w: int, spec: MaskSpec | str, rng: np.random.Generator | None = None
) -> MeasurementMask:
    if isinstance(spec, str):
        spec = parse_mask_spec(spec)
    if isinstance(spec, GridMaskSpec):
        return make_grid_mask(h, w, spec.reduce_factor)
    return make_line_cut_mask(h, w, spec, rng)


def expected_measured_count(h: int, w: int, spec: MaskSpec) -> int:
    """Measured-pixel count of a mask spec without building the mask."""
    if isinstance(spec, GridMaskSpec):
        n = spec.reduce_factor
        return -(-h // n) * -(-w // n)
    if spec.randomized:
        raise MaskSpecError("randomized line cuts have no closed-form count")
    _validate_line_cut(h, w, spec)
    rows = len(_band_indices(h, spec.n_h, spec.t_h, None))
    cols = len(_band_indices(w, spec.n_v, spec.t_v, None))
    return rows * w + cols * h - rows * cols


def apply_mask(pixels: np.ndarray, mask: MeasurementMask) -> np.ndarray:
    """Sparse measurement y: pixels where measured, exactly 0 elsewhere."""
    if pixels.shape != mask.shape:
        raise ShapeMismatchError(f"image {pixels.shape} and mask {mask.shape} differ")
    return np.where(mask.bits, pixels, np.zeros((), dtype=pixels.dtype))


def density(mask: MeasurementMask) -> float:
    h, w = mask.shape
    return mask.n_measured / (h * w)
