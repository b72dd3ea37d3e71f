"""
Experiment configuration.

A run is described by one TOML file:

    name = "desk"
    seed = 0
    output_dir = "runs/desk"
    masks = ["grid:5", "lc:8-8-4-4", "lc:4-4-8-8"]
    steps = [20, 60]
    methods = ["diffusion", "linear", "idw", "biharmonic"]

    [data]          # omit `path` to use the synthetic generator
    path = "data/csd1"
    test_count = 20

    [synthetic]
    count = 1132
    size = 128

    [training]
    epochs = 30
    batch_size = 16

    [evaluation]
    workers = 4
    min_ridge_iou = 0.3
    checkpoint_epochs = true

Command-line flags override file values through dotted keys
(``training.epochs=5``).
"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from app.core.config import settings
from app.core.exceptions import ConfigError, MaskSpecError
from app.services.masking import parse_mask_spec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

Method = Literal["diffusion", "linear", "idw", "biharmonic"]
BASELINE_METHODS: tuple[str, ...] = ("linear", "idw", "biharmonic")
STANDARD_STEPS: tuple[int, ...] = (20, 60, 100, 140)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    path: str | None = None  # directory of CSD1 files
    test_ids: list[str] | None = None
    test_count: int = Field(default=20, ge=1)


class SyntheticSection(_Section):
    count: int = Field(default=1132, ge=30)
    size: int = Field(default=128, ge=8)
    n_lines: int = Field(default=4, ge=1)
    noise_sigma: float = Field(default=0.05, ge=0.0)
    vary: bool = True


class TrainingSection(_Section):
    enabled: bool = True
    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=16, ge=1)
    lr: float = Field(default=3e-4, gt=0.0)
    checkpoint_every: int = Field(default=5, ge=1)
    base_channels: int = Field(default=32, ge=1)
    levels: int = Field(default=3, ge=1)
    checkpoint_dir: str | None = None  # defaults to <output_dir>/checkpoints


class EvaluationSection(_Section):
    workers: int = Field(default=1, ge=1)
    f1_tolerance: int = Field(default=1, ge=0)
    replace_known: bool = False
    min_ridge_iou: float = Field(default=0.3, ge=0.0, le=1.0)
    max_test_images: int | None = Field(default=None, ge=1)
    write_images: bool = True
    checkpoint_epochs: bool = False  # also score every intermediate checkpoint


class ExperimentConfig(_Section):
    name: str = "experiment"
    seed: int = settings.DEFAULT_SEED
    output_dir: str = settings.OUTPUT_DIR
    masks: list[str] = Field(default_factory=lambda: ["grid:5", "lc:8-8-4-4"])
    steps: list[int] = Field(default_factory=lambda: list(STANDARD_STEPS))
    methods: list[Method] = Field(default_factory=lambda: ["diffusion", *BASELINE_METHODS])

    data: DataSection = Field(default_factory=DataSection)
    synthetic: SyntheticSection = Field(default_factory=SyntheticSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)

    @field_validator("masks")
    @classmethod
    def _masks_parse(cls, v: list[str]) -> list[str]:
        if not v:
            raise ValueError("at least one mask spec is required")
        try:
            return [parse_mask_spec(s).label for s in v]
        except MaskSpecError as e:
            raise ValueError(str(e)) from e

    @field_validator("steps")
    @classmethod
    def _steps_valid(cls, v: list[int]) -> list[int]:
        if not v:
            raise ValueError("at least one diffusion step count is required")
        if any(s < 2 for s in v):
            raise ValueError(f"diffusion step counts must be >= 2, got {v}")
        return sorted(set(v))

    @field_validator("methods")
    @classmethod
    def _methods_nonempty(cls, v: list[str]) -> list[str]:
        if not v:
            raise ValueError("at least one method is required")
        return list(dict.fromkeys(v))

    @property
    def baselines(self) -> list[str]:
        return [m for m in self.methods if m in BASELINE_METHODS]

    @property
    def uses_diffusion(self) -> bool:
        return "diffusion" in self.methods

    @property
    def cell_count(self) -> int:
        diffusion_cells = len(self.masks) * len(self.steps) if self.uses_diffusion else 0
        return diffusion_cells + len(self.baselines) * len(self.masks)

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.training.checkpoint_dir or Path(self.output_dir) / "checkpoints")


def _coerce(value: str) -> Any:
    """Parse a CLI override value as a TOML scalar or array, falling back to a plain string."""
    try:
        return tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        return value


def apply_overrides(raw: dict[str, Any], overrides: dict[str, Any] | list[str]) -> dict[str, Any]:
    """Merge dotted-key overrides (``{"training.epochs": 5}`` or ``["training.epochs=5"]``) into ``raw``."""
    if isinstance(overrides, list):
        pairs = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override '{item}' is not of the form key=value")
            key, value = item.split("=", 1)
            pairs[key.strip()] = _coerce(value.strip())
        overrides = pairs

    merged = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    for key, value in overrides.items():
        if value is None:
            continue
        *parents, leaf = key.split(".")
        node = merged
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override '{key}' descends into a non-table value")
        node[leaf] = value
    return merged


def load_experiment_config(
    path: str | Path | None = None,
    overrides: dict[str, Any] | list[str] | None = None,
) -> ExperimentConfig:
    raw: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path.name}: {e}") from e

    raw = apply_overrides(raw, overrides or {})
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment configuration:\n{e}") from e
