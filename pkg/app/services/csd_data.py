from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from app.core.exceptions import CsdFormatError, InsufficientDataError
from app.utils.logger import get_logger
from app.utils.rng import SPLIT, substream

logger = get_logger(__name__)

DEFAULT_TEST_COUNT = 20
TRAIN_FRACTION = 0.9
MIN_SPLIT_IDS = 30


@dataclass(frozen=True, slots=True)
class ChargeStabilityDiagram:
    """Normalized sensor signal over a (V1, V2) gate-voltage window."""

    pixels: np.ndarray  # (H, W), float32 in [0, 1]
    v1_range: tuple[float, float] = (0.0, 1.0)
    v2_range: tuple[float, float] = (0.0, 1.0)
    id: str = ""

    def __post_init__(self) -> None:
        if self.pixels.ndim != 2:
            raise CsdFormatError(f"CSD pixels must be 2-D, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise CsdFormatError(f"CSD '{self.id}' contains non-finite pixels")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True, slots=True)
class DatasetSplit:
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    seed: int = 0
    meta: dict = field(default_factory=dict)


def normalize(raw: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling to [0, 1]; a constant field maps to 0.5."""
    values = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise CsdFormatError("cannot normalize a field with non-finite values")
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full(values.shape, 0.5, dtype=np.float32)
    return ((values - lo) / (hi - lo)).astype(np.float32)


def _is_numeric(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def import_csv(
    path: str | Path,
    v1_range: tuple[float, float] = (0.0, 1.0),
    v2_range: tuple[float, float] = (0.0, 1.0),
    csd_id: str | None = None,
) -> ChargeStabilityDiagram:
    """
    Read a rectangular comma-separated export of a measured CSD.

    A first row containing any non-numeric cell is treated as a header.
    Values are normalized with :func:`normalize`.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(
            path, header=None, dtype=str, keep_default_na=False, skip_blank_lines=True
        )
    except pd.errors.ParserError as e:
        raise CsdFormatError(f"{path.name}: ragged rows ({e})") from e
    except pd.errors.EmptyDataError as e:
        raise CsdFormatError(f"{path.name}: empty file") from e

    if frame.isna().to_numpy().any():
        raise CsdFormatError(f"{path.name}: ragged rows")
    cells = frame.apply(lambda col: col.str.strip())
    # the parser pads short rows with empty fields
    if (cells == "").to_numpy().any():
        raise CsdFormatError(f"{path.name}: ragged rows or empty cells")

    if not all(_is_numeric(c) for c in cells.iloc[0]):
        cells = cells.iloc[1:]
    if cells.empty:
        raise CsdFormatError(f"{path.name}: no data rows")

    try:
        values = cells.apply(lambda col: pd.to_numeric(col, errors="raise")).to_numpy(
            dtype=np.float64
        )
    except (ValueError, TypeError) as e:
        raise CsdFormatError(f"{path.name}: non-numeric cell ({e})") from e

    return ChargeStabilityDiagram(
        pixels=normalize(values),
        v1_range=tuple(map(float, v1_range)),
        v2_range=tuple(map(float, v2_range)),
        id=csd_id or path.stem,
    )


def make_splits(
    ids: list[str],
    seed: int,
    test_count: int = DEFAULT_TEST_COUNT,
    test_ids: list[str] | None = None,
) -> DatasetSplit:
    """
    Hold out a fixed test set first, then split the rest 90/10 into train/val.

    ``test_ids`` pins a hand-picked test set; otherwise ``test_count`` ids are
    drawn with the run seed.
    """
    unique = list(dict.fromkeys(ids))
    if len(unique) != len(ids):
        raise InsufficientDataError("dataset ids must be unique")
    if len(unique) < MIN_SPLIT_IDS:
        raise InsufficientDataError(f"need at least {MIN_SPLIT_IDS} ids, got {len(unique)}")

    rng = substream(seed, SPLIT)
    if test_ids is not None:
        missing = set(test_ids) - set(unique)
        if missing:
            raise InsufficientDataError(f"test ids not in dataset: {sorted(missing)[:5]}")
        test = list(test_ids)
    else:
        if test_count >= len(unique):
            raise InsufficientDataError(f"test_count {test_count} leaves no training data")
        picked = rng.choice(len(unique), size=test_count, replace=False)
        test = [unique[i] for i in sorted(picked)]

    held_out = set(test)
    rest = [i for i in unique if i not in held_out]
    order = rng.permutation(len(rest))
    n_train = math.floor(TRAIN_FRACTION * len(rest))
    train = [rest[i] for i in order[:n_train]]
    val = [rest[i] for i in order[n_train:]]

    logger.info(f"Split {len(unique)} ids: {len(train)} train, {len(val)} val, {len(test)} test")
    return DatasetSplit(train_ids=train, val_ids=val, test_ids=test, seed=seed)
