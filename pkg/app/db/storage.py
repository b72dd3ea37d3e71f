"""
File persistence: the CSD1 image container, metric CSVs and atomic writes.

CSD1 layout (little-endian):
    magic   4 bytes  b"CSD1"
    H, W    u32 x 2
    extents f64 x 4  (v1_min, v1_max, v2_min, v2_max)
    pixels  f32 x H*W, row-major
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from app.core.exceptions import CsdFormatError
from app.services.csd_data import ChargeStabilityDiagram
from app.utils.logger import get_logger

logger = get_logger(__name__)

CSD_MAGIC = b"CSD1"
CSD_HEADER = np.dtype([("magic", "S4"), ("h", "<u4"), ("w", "<u4"), ("extents", "<f8", (4,))])
PIXEL_DTYPE = np.dtype("<f4")
CSV_FLOAT_FORMAT = "%.17g"


def atomic_write_bytes(path: str | Path, payload: bytes) -> Path:
    """Write to a temporary sibling file, then rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def atomic_write_text(path: str | Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: str | Path, payload: Any) -> Path:
    return atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n")


# CSD1


def encode_csdc(csd: ChargeStabilityDiagram) -> bytes:
    h, w = csd.shape
    header = np.zeros((), dtype=CSD_HEADER)
    header["magic"] = CSD_MAGIC
    header["h"] = h
    header["w"] = w
    header["extents"] = [*csd.v1_range, *csd.v2_range]
    return header.tobytes() + np.ascontiguousarray(csd.pixels, dtype=PIXEL_DTYPE).tobytes()


def decode_csdc(payload: bytes, csd_id: str = "") -> ChargeStabilityDiagram:
    if len(payload) < CSD_HEADER.itemsize:
        raise CsdFormatError(f"truncated CSD1 header ({len(payload)} bytes)")
    header = np.frombuffer(payload, dtype=CSD_HEADER, count=1)[0]
    if bytes(header["magic"]) != CSD_MAGIC:
        raise CsdFormatError(f"bad magic {bytes(header['magic'])!r}, expected {CSD_MAGIC!r}")

    h, w = int(header["h"]), int(header["w"])
    expected = CSD_HEADER.itemsize + h * w * PIXEL_DTYPE.itemsize
    if len(payload) != expected:
        raise CsdFormatError(f"CSD1 payload is {len(payload)} bytes, header implies {expected}")

    pixels = np.frombuffer(payload, dtype=PIXEL_DTYPE, offset=CSD_HEADER.itemsize).reshape(h, w)
    pixels = pixels.astype(np.float32)  # native-endian, writable copy
    extents = [float(x) for x in header["extents"]]
    return ChargeStabilityDiagram(
        pixels=pixels,
        v1_range=(extents[0], extents[1]),
        v2_range=(extents[2], extents[3]),
        id=csd_id,
    )


def save_csdc(csd: ChargeStabilityDiagram, path: str | Path) -> Path:
    return atomic_write_bytes(path, encode_csdc(csd))


def load_csdc(path: str | Path) -> ChargeStabilityDiagram:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except FileNotFoundError as e:
        raise CsdFormatError(f"CSD1 file not found: {path}") from e
    return decode_csdc(payload, csd_id=path.stem)


def load_csdc_dir(directory: str | Path) -> list[ChargeStabilityDiagram]:
    """All ``*.csd`` files of a directory, sorted by file name."""
    files = sorted(Path(directory).glob("*.csd"))
    logger.info(f"Loading {len(files)} CSD1 files from {directory}")
    return [load_csdc(f) for f in files]


# CSV


def emit_csv(frame: pd.DataFrame, path: str | Path, meta: dict[str, Any] | None = None) -> Path:
    """
    Write a metric table with 17 significant digits so floats reload exactly.

    ``meta`` is written as leading ``# key=value`` comment rows.
    """
    lines = [f"# {key}={value}\n" for key, value in sorted((meta or {}).items())]
    body = frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return atomic_write_text(path, "".join(lines) + body)


def read_csv(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#", float_precision="round_trip")
