"""
Denoiser checkpoints in the QDDM container.

Layout (little-endian): magic b"QDDM", u32 version, u32 T, u32 base_channels,
u32 levels, u64 parameter count, then the parameters as f32 in the fixed layer
order of DenoiserParameters.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from app.core.exceptions import CheckpointError, CheckpointMismatchError
from app.db.storage import atomic_write_bytes
from app.services.unet import DenoiserParameters, UNetConfig, parameter_count
from app.utils.logger import get_logger

logger = get_logger(__name__)

CHECKPOINT_MAGIC = b"QDDM"
CHECKPOINT_VERSION = 1
CHECKPOINT_HEADER = np.dtype(
    [
        ("magic", "S4"),
        ("version", "<u4"),
        ("steps", "<u4"),
        ("base_channels", "<u4"),
        ("levels", "<u4"),
        ("count", "<u8"),
    ]
)
PARAM_DTYPE = np.dtype("<f4")


def checkpoint_name(mask_label: str, steps: int, epoch: int | None = None) -> str:
    safe = mask_label.replace(":", "_")
    suffix = f"_e{epoch:03d}" if epoch is not None else ""
    return f"denoiser_{safe}_T{steps}{suffix}.qddm"


def encode_checkpoint(params: DenoiserParameters) -> bytes:
    header = np.zeros((), dtype=CHECKPOINT_HEADER)
    header["magic"] = CHECKPOINT_MAGIC
    header["version"] = CHECKPOINT_VERSION
    header["steps"] = params.steps
    header["base_channels"] = params.config.base_channels
    header["levels"] = params.config.levels
    header["count"] = params.parameter_count
    return header.tobytes() + np.ascontiguousarray(params.vector, dtype=PARAM_DTYPE).tobytes()


def decode_checkpoint(payload: bytes, expected_steps: int | None = None) -> DenoiserParameters:
    if len(payload) < CHECKPOINT_HEADER.itemsize:
        raise CheckpointError(f"truncated checkpoint header ({len(payload)} bytes)")
    header = np.frombuffer(payload, dtype=CHECKPOINT_HEADER, count=1)[0]
    if bytes(header["magic"]) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {bytes(header['magic'])!r}, expected {CHECKPOINT_MAGIC!r}")
    if int(header["version"]) != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {int(header['version'])}")

    steps = int(header["steps"])
    if expected_steps is not None and steps != expected_steps:
        raise CheckpointMismatchError(f"checkpoint was trained for T={steps}, run needs T={expected_steps}")

    config = UNetConfig(base_channels=int(header["base_channels"]), levels=int(header["levels"]))
    count = int(header["count"])
    if count != parameter_count(config):
        raise CheckpointMismatchError(
            f"checkpoint holds {count} parameters, layout for {config.base_channels} channels / "
            f"{config.levels} levels needs {parameter_count(config)}"
        )
    expected = CHECKPOINT_HEADER.itemsize + count * PARAM_DTYPE.itemsize
    if len(payload) != expected:
        raise CheckpointError(f"checkpoint is {len(payload)} bytes, header implies {expected}")

    vector = np.frombuffer(payload, dtype=PARAM_DTYPE, offset=CHECKPOINT_HEADER.itemsize).astype(np.float32)
    return DenoiserParameters(config, steps, vector)


def save_checkpoint(params: DenoiserParameters, path: str | Path) -> Path:
    path = atomic_write_bytes(path, encode_checkpoint(params))
    logger.info(f"Saved checkpoint T={params.steps} ({params.parameter_count} params) to {path}")
    return path


def load_checkpoint(path: str | Path, expected_steps: int | None = None) -> DenoiserParameters:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), expected_steps)
