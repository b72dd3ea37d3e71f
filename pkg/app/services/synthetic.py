"""
Synthetic double-dot charge stability diagrams.

Two families of transition lines (near-vertical and near-horizontal) are
placed with jittered spacing. Every crossing is split into a pair of triple
points joined by a short interdot segment, which gives the honeycomb pattern
of a double quantum dot. The sensor signal is a tilted background plane plus
a Gaussian line profile plus white noise, min-max normalized.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numba
import numpy as np

from app.core.exceptions import InsufficientDataError
from app.services.csd_data import ChargeStabilityDiagram, normalize
from app.utils.logger import get_logger
from app.utils.rng import SYNTH, substream

logger = get_logger(__name__)

_INTERDOT_DIRECTION = np.array([1.0, 1.0]) / np.sqrt(2.0)  # (row, col)


@dataclass(frozen=True, slots=True)
class SyntheticConfig:
    size: int = 128
    n_lines_family1: int = 4
    n_lines_family2: int = 4
    slope1: float = -8.0  # d(row)/d(col), near-vertical family
    slope2: float = -0.12  # d(row)/d(col), near-horizontal family
    line_width: float = 1.5  # px, std of the Gaussian cross-section
    line_contrast: float = 0.6
    background_tilt: float = 0.15  # signal rise across the frame diagonal
    noise_sigma: float = 0.05
    anticrossing_gap: float = 3.0  # px between the two triple points
    spacing_jitter: float = 0.2  # fraction of the nominal line spacing
    seed: int = 0

    def validate(self) -> None:
        if self.n_lines_family1 < 1 or self.n_lines_family2 < 1:
            raise InsufficientDataError("each line family needs at least one line")
        if self.line_width < 1:
            raise ValueError(f"line_width must be >= 1 px, got {self.line_width}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.size < 2:
            raise ValueError(f"size must be >= 2, got {self.size}")
        if self.slope1 == 0 or abs(1.0 - self.slope2 / self.slope1) < 1e-6:
            raise ValueError("line families must not be parallel")
        if self.anticrossing_gap < 0:
            raise ValueError("anticrossing_gap must be >= 0")


@dataclass(frozen=True, slots=True)
class SyntheticSample:
    csd: ChargeStabilityDiagram
    line_raster: np.ndarray  # bool (H, W), 1-px centerlines of every drawn segment
    raw_signal: np.ndarray  # before normalization
    background: np.ndarray


@numba.njit(cache=True)
def _render_segments(segments, h, w, width, contrast):
    """Max over segments of contrast * exp(-d^2 / (2 width^2))."""
    out = np.zeros((h, w), dtype=np.float64)
    inv = 1.0 / (2.0 * width * width)
    cutoff = (6.0 * width) ** 2
    for s in range(segments.shape[0]):
        r0, c0, r1, c1 = segments[s, 0], segments[s, 1], segments[s, 2], segments[s, 3]
        dr, dc = r1 - r0, c1 - c0
        length2 = dr * dr + dc * dc
        for i in range(h):
            for j in range(w):
                if length2 > 0.0:
                    t = ((i - r0) * dr + (j - c0) * dc) / length2
                    t = min(1.0, max(0.0, t))
                else:
                    t = 0.0
                pr = r0 + t * dr - i
                pc = c0 + t * dc - j
                d2 = pr * pr + pc * pc
                if d2 < cutoff:
                    v = contrast * np.exp(-d2 * inv)
                    if v > out[i, j]:
                        out[i, j] = v
    return out


@numba.njit(cache=True)
def _rasterize_segments(segments, h, w):
    raster = np.zeros((h, w), dtype=np.bool_)
    for s in range(segments.shape[0]):
        r0, c0, r1, c1 = segments[s, 0], segments[s, 1], segments[s, 2], segments[s, 3]
        n = int(np.ceil(4.0 * max(abs(r1 - r0), abs(c1 - c0)))) + 1
        for k in range(n + 1):
            t = k / n
            i = int(np.floor(r0 + t * (r1 - r0) + 0.5))
            j = int(np.floor(c0 + t * (c1 - c0) + 0.5))
            if 0 <= i < h and 0 <= j < w:
                raster[i, j] = True
    return raster


def _line_positions(count: int, extent: int, jitter: float, rng: np.random.Generator) -> np.ndarray:
    spacing = extent / count
    nominal = (np.arange(count) + 0.5) * spacing
    return np.sort(nominal + rng.uniform(-jitter, jitter, size=count) * spacing)


def build_segments(config: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    """Segment list (N, 4) of (r0, c0, r1, c1) for both families and all interdot links."""
    h = w = config.size
    r_mid, c_mid = h / 2.0, w / 2.0
    s1, s2 = config.slope1, config.slope2

    cols = _line_positions(config.n_lines_family1, w, config.spacing_jitter, rng)
    rows = _line_positions(config.n_lines_family2, h, config.spacing_jitter, rng)

    def family1(k: int, r: float) -> tuple[float, float]:
        return r, cols[k] + (r - r_mid) / s1

    def family2(m: int, c: float) -> tuple[float, float]:
        return rows[m] + s2 * (c - c_mid), c

    half_gap = 0.5 * config.anticrossing_gap * _INTERDOT_DIRECTION
    upper = np.empty((len(cols), len(rows), 2))
    lower = np.empty((len(cols), len(rows), 2))
    for k in range(len(cols)):
        for m in range(len(rows)):
            c = (cols[k] + (rows[m] - s2 * c_mid - r_mid) / s1) / (1.0 - s2 / s1)
            crossing = np.array(family2(m, c))
            upper[k, m] = crossing - half_gap
            lower[k, m] = crossing + half_gap

    segments: list[tuple[float, float, float, float]] = []
    for k in range(len(cols)):
        start = family1(k, -0.5 * h)
        for m in range(len(rows)):
            segments.append((*start, *upper[k, m]))
            start = tuple(lower[k, m])
        segments.append((*start, *family1(k, 1.5 * h)))

    for m in range(len(rows)):
        start = family2(m, -0.5 * w)
        for k in range(len(cols)):
            segments.append((*start, *upper[k, m]))
            start = tuple(lower[k, m])
        segments.append((*start, *family2(m, 1.5 * w)))

    if config.anticrossing_gap > 0:
        for k in range(len(cols)):
            for m in range(len(rows)):
                segments.append((*upper[k, m], *lower[k, m]))

    return np.asarray(segments, dtype=np.float64)


def synthesize_csd(config: SyntheticConfig, csd_id: str | None = None) -> SyntheticSample:
    """Render one synthetic CSD. Deterministic in ``config.seed``."""
    config.validate()
    rng = substream(config.seed, SYNTH)
    h = w = config.size

    segments = build_segments(config, rng)
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    diagonal = max(h - 1, 1) + max(w - 1, 1)
    background = config.background_tilt * (rr + cc) / diagonal

    lines = _render_segments(segments, h, w, float(config.line_width), float(config.line_contrast))
    raw = background + lines
    if config.noise_sigma > 0:
        raw = raw + rng.normal(0.0, config.noise_sigma, size=(h, w))

    csd = ChargeStabilityDiagram(
        pixels=normalize(raw),
        v1_range=(0.0, 1.0),
        v2_range=(0.0, 1.0),
        id=csd_id or f"synth-{config.seed}",
    )
    return SyntheticSample(
        csd=csd,
        line_raster=_rasterize_segments(segments, h, w),
        raw_signal=raw,
        background=background,
    )


def varied_config(base: SyntheticConfig, seed: int) -> SyntheticConfig:
    """Per-item perturbation of ``base`` so a generated dataset is not one repeated device."""
    rng = substream(seed, SYNTH, "vary")
    return replace(
        base,
        n_lines_family1=max(1, base.n_lines_family1 + int(rng.integers(-1, 2))),
        n_lines_family2=max(1, base.n_lines_family2 + int(rng.integers(-1, 2))),
        slope1=base.slope1 * float(rng.uniform(0.8, 1.25)),
        slope2=base.slope2 * float(rng.uniform(0.8, 1.25)),
        line_contrast=base.line_contrast * float(rng.uniform(0.75, 1.25)),
        noise_sigma=base.noise_sigma * float(rng.uniform(0.5, 1.5)),
        seed=seed,
    )


def generate_dataset(
    count: int, base: SyntheticConfig, seed: int, vary: bool = True
) -> list[SyntheticSample]:
    samples = []
    for i in range(count):
        item_seed = int(substream(seed, SYNTH, "item", i).integers(0, 2**31 - 1))
        config = varied_config(base, item_seed) if vary else replace(base, seed=item_seed)
        samples.append(synthesize_csd(config, csd_id=f"synth-{i:05d}"))
    logger.info(f"Generated {count} synthetic CSDs ({base.size}x{base.size}, seed={seed})")
    return samples
