"""
Idealized acquisition + inference time model.

T_total = n_p * t_p + t_d, with n_p the number of measured pixels, t_p the
integration time per pixel and t_d the diffusion inference time. System
latencies such as data transfer are not modelled.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import pandas as pd

from app.core.config import settings
from app.services.masking import MaskSpec, MeasurementMask, make_mask, parse_mask_spec
from app.utils.rng import MASK, substream


@dataclass(frozen=True, slots=True)
class TimeBudget:
    n_p: int
    t_p: float
    t_d: float
    total: float
    full_scan: float  # H * W * t_p; equals n_p * t_p when the frame size is unknown
    speedup: float  # full_scan / total, inf when total is 0 and full_scan > 0

    def as_dict(self) -> dict[str, float]:
        return {
            "n_p": self.n_p,
            "t_p": self.t_p,
            "t_d": self.t_d,
            "total": self.total,
            "full_scan": self.full_scan,
            "speedup": self.speedup,
        }


def reference_inference_time(steps: int) -> float:
    """Reference inference time, scaled linearly from 0.02 s per 20 steps."""
    if steps < 0:
        raise ValueError(f"diffusion steps must be >= 0, got {steps}")
    return settings.REFERENCE_INFERENCE_S * steps / settings.REFERENCE_INFERENCE_STEPS


def time_to_reconstruct(
    mask: MeasurementMask | int,
    t_p: float | None = None,
    t_d: float = 0.0,
    full_pixels: int | None = None,
) -> TimeBudget:
    if t_p is None:
        t_p = settings.PIXEL_TIME_S
    if t_p < 0 or t_d < 0:
        raise ValueError(f"times must be non-negative, got t_p={t_p}, t_d={t_d}")

    if isinstance(mask, MeasurementMask):
        n_p = mask.n_measured
        full_pixels = full_pixels or mask.shape[0] * mask.shape[1]
    else:
        n_p = int(mask)
        if n_p < 0:
            raise ValueError(f"measured pixel count must be >= 0, got {n_p}")

    total = n_p * t_p + t_d
    full_scan = (full_pixels if full_pixels is not None else n_p) * t_p
    if total > 0:
        speedup = full_scan / total
    else:
        speedup = float("inf") if full_scan > 0 else 1.0
    return TimeBudget(n_p=n_p, t_p=t_p, t_d=t_d, total=total, full_scan=full_scan, speedup=speedup)


def sweep(
    masks: Iterable[MaskSpec | str],
    steps: Iterable[int],
    shape: tuple[int, int] = (128, 128),
    t_p: float | None = None,
) -> pd.DataFrame:
    """Time budget table over mask protocols x diffusion step counts, plus a scan-only row per mask."""
    rows = []
    steps = list(steps)
    for entry in masks:
        spec = parse_mask_spec(entry) if isinstance(entry, str) else entry
        mask = make_mask(*shape, spec, rng=substream(0, MASK, "sweep", spec.label))
        for n_steps in [0, *steps]:
            budget = time_to_reconstruct(mask, t_p, reference_inference_time(n_steps))
            rows.append({"mask": spec.label, "steps": n_steps, "density": mask.n_measured / mask.bits.size, **budget.as_dict()})
    return pd.DataFrame(rows)
