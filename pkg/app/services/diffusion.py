from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
import pandas as pd

from app.core.exceptions import CheckpointMismatchError, DataLeakError, NumericFaultError
from app.services import numerics as nx
from app.services.csd_data import ChargeStabilityDiagram
from app.services.masking import MaskSpec, MeasurementMask, apply_mask, make_mask, parse_mask_spec
from app.services.unet import (
    DenoiserParameters,
    ForwardCache,
    TimeEmbeddingConfig,
    UNetConfig,
    denoiser_backward,
    denoiser_forward,
)
from app.utils.logger import get_logger
from app.utils.rng import INIT, MASK, NOISE, SHUFFLE, VALIDATION, substream

logger = get_logger(__name__)

__all__ = [
    "NoiseSchedule",
    "TimeEmbeddingConfig",
    "TrainingConfig",
    "TrainingHistory",
    "DiffusionTrainer",
    "build_schedule",
    "forward_noise",
    "training_step",
    "train",
    "reconstruct",
    "checkpoint_epochs",
]

BETA_START = 1e-4
BETA_END = 0.02


@dataclass(frozen=True, slots=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_prev(self, t: int) -> float:
        """alpha_bar at t-1, with alpha_bar(-1) = 1."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def build_schedule(T: int, beta_start: float = BETA_START, beta_end: float = BETA_END) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` over T steps."""
    if T < 2:
        raise ValueError(f"diffusion needs at least 2 steps, got {T}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Sample of q(x_t | x0): sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if not 0 <= t < schedule.T:
        raise ValueError(f"time step {t} out of range [0, {schedule.T})")
    abar = schedule.alpha_bar[t]
    return (math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps).astype(x0.dtype, copy=False)


# Training


@dataclass(frozen=True, slots=True)
class TrainingConfig:
    """Immutable configuration for denoiser training."""

    epochs: int = 30
    batch_size: int = 16
    lr: float = 3e-4
    checkpoint_every: int = 5
    unet: UNetConfig = field(default_factory=UNetConfig)


@dataclass(slots=True)
class TrainingHistory:
    epoch_loss_mean: list[float] = field(default_factory=list)
    epoch_loss_std: list[float] = field(default_factory=list)
    val_loss: dict[int, float] = field(default_factory=dict)
    checkpoints: dict[int, DenoiserParameters] = field(default_factory=dict)
    step_losses: list[float] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        epochs = range(1, len(self.epoch_loss_mean) + 1)
        return pd.DataFrame(
            {
                "epoch": list(epochs),
                "train_loss_mean": self.epoch_loss_mean,
                "train_loss_std": self.epoch_loss_std,
                "val_loss": [self.val_loss.get(e, np.nan) for e in epochs],
                "checkpoint": [e in self.checkpoints for e in epochs],
            }
        )


Batch = Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]]  # (x0, y, M)


def checkpoint_epochs(epochs: int, every: int = 5) -> list[int]:
    """Epoch 1, every ``every``-th epoch, and the final epoch."""
    marks = {1, epochs} | set(range(every, epochs + 1, every))
    return sorted(e for e in marks if 1 <= e <= epochs)


def training_step(
    params: DenoiserParameters,
    adam_state: nx.AdamState,
    batch: Batch,
    rng: np.random.Generator,
    schedule: NoiseSchedule,
) -> tuple[DenoiserParameters, nx.AdamState, float]:
    """
    One optimizer step on the mean x0-prediction MSE of ``batch``.

    Each item gets its own t ~ U{0..T-1} and eps ~ N(0, 1); gradients are
    accumulated in item order.
    """
    if not batch:
        raise ValueError("training batch is empty")
    if params.steps != schedule.T:
        raise CheckpointMismatchError(f"parameters trained for T={params.steps}, schedule has T={schedule.T}")

    grads = np.zeros_like(params.vector)
    total = 0.0
    for x0, y, mask in batch:
        t = int(rng.integers(0, schedule.T))
        eps = rng.standard_normal(x0.shape).astype(params.dtype)
        x_t = forward_noise(x0.astype(params.dtype, copy=False), t, eps, schedule)

        cache = ForwardCache()
        pred = denoiser_forward(params, x_t, y, mask, t, cache=cache)
        target = x0.astype(params.dtype, copy=False)
        total += nx.mse(pred, target)
        grads += denoiser_backward(params, cache, nx.mse_backward(pred, target))

    loss = total / len(batch)
    if not math.isfinite(loss):
        raise NumericFaultError(f"non-finite training loss ({loss}) at Adam step {adam_state.step + 1}")
    grads /= len(batch)
    vector, adam_state = nx.adam_step(params.vector, grads, adam_state)
    return params.with_vector(vector), adam_state, loss


class DiffusionTrainer:
    """Trains one denoiser for one (mask protocol, diffusion steps) cell."""

    __slots__ = ("config", "schedule", "seed", "params", "adam", "history")

    def __init__(
        self,
        schedule: NoiseSchedule,
        config: TrainingConfig | None = None,
        seed: int = 0,
        params: DenoiserParameters | None = None,
    ):
        self.config = config or TrainingConfig()
        self.schedule = schedule
        self.seed = seed
        if params is None:
            params = DenoiserParameters.initialize(self.config.unet, schedule.T, substream(seed, INIT))
        self.params = params
        if self.params.steps != schedule.T:
            raise CheckpointMismatchError(
                f"initial parameters are for T={self.params.steps}, schedule has T={schedule.T}"
            )
        self.adam = nx.AdamState.zeros(self.params.parameter_count, self.params.dtype, lr=self.config.lr)
        self.history = TrainingHistory()

    def _mask_for(
        self, shape: tuple[int, int], spec: MaskSpec, fixed: MeasurementMask | None, *keys: int | str
    ) -> MeasurementMask:
        if fixed is not None and fixed.shape == shape:
            return fixed
        return make_mask(*shape, spec, rng=substream(self.seed, MASK, *keys))

    def _prepare_validation(
        self, items: Sequence[ChargeStabilityDiagram], spec: MaskSpec, fixed: MeasurementMask | None
    ) -> list[tuple[np.ndarray, np.ndarray, np.ndarray, int, np.ndarray]]:
        prepared = []
        for j, csd in enumerate(items):
            mask = self._mask_for(csd.shape, spec, fixed, VALIDATION, j)
            rng = substream(self.seed, VALIDATION, j)
            t = int(rng.integers(0, self.schedule.T))
            eps = rng.standard_normal(csd.shape).astype(self.params.dtype)
            prepared.append((csd.pixels, apply_mask(csd.pixels, mask), mask.bits, t, eps))
        return prepared

    def validation_loss(self, prepared) -> float:
        """Mean x0-prediction MSE over fixed (mask, t, eps) draws; parameters are not touched."""
        if not prepared:
            return float("nan")
        losses = []
        for x0, y, mask, t, eps in prepared:
            x0 = x0.astype(self.params.dtype, copy=False)
            x_t = forward_noise(x0, t, eps, self.schedule)
            losses.append(nx.mse(denoiser_forward(self.params, x_t, y, mask, t), x0))
        return float(np.mean(losses))

    def training_step(self, batch: Batch, rng: np.random.Generator) -> float:
        self.params, self.adam, loss = training_step(self.params, self.adam, batch, rng, self.schedule)
        self.history.step_losses.append(loss)
        return loss

    def train(
        self,
        train_items: Sequence[ChargeStabilityDiagram],
        val_items: Sequence[ChargeStabilityDiagram],
        mask_spec: MaskSpec | str,
        excluded_ids: Iterable[str] = (),
        callback: Callable[[int, float], None] | None = None,
    ) -> TrainingHistory:
        """Run all epochs; checkpoints and validation losses land in ``self.history``."""
        if not train_items:
            raise ValueError("training set is empty")
        spec = parse_mask_spec(mask_spec) if isinstance(mask_spec, str) else mask_spec
        excluded = set(excluded_ids)
        shape = train_items[0].shape
        randomized = getattr(spec, "randomized", False)
        fixed = None if randomized else make_mask(*shape, spec)

        validation = self._prepare_validation(val_items, spec, fixed)
        marks = set(checkpoint_epochs(self.config.epochs, self.config.checkpoint_every))
        noise_rng = substream(self.seed, NOISE)
        n = len(train_items)

        for epoch in range(1, self.config.epochs + 1):
            order = substream(self.seed, SHUFFLE, epoch).permutation(n)
            batch_losses = []
            for start in range(0, n, self.config.batch_size):
                batch = []
                for i in order[start : start + self.config.batch_size]:
                    csd = train_items[int(i)]
                    if csd.id in excluded:
                        raise DataLeakError(f"test CSD '{csd.id}' reached a training batch")
                    mask = self._mask_for(csd.shape, spec, fixed, epoch, int(i))
                    batch.append((csd.pixels, apply_mask(csd.pixels, mask), mask.bits))
                try:
                    batch_losses.append(self.training_step(batch, noise_rng))
                except NumericFaultError as e:
                    logger.error(f"Epoch {epoch} aborted: {e}")
                    raise

            mean, std = float(np.mean(batch_losses)), float(np.std(batch_losses))
            self.history.epoch_loss_mean.append(mean)
            self.history.epoch_loss_std.append(std)

            if epoch in marks:
                val = self.validation_loss(validation)
                self.history.val_loss[epoch] = val
                self.history.checkpoints[epoch] = self.params.copy()
                logger.info(
                    f"[{spec.label} T={self.schedule.T}] epoch {epoch}/{self.config.epochs} "
                    f"loss={mean:.5f}±{std:.5f} val={val:.5f} (checkpoint)"
                )
            else:
                logger.info(
                    f"[{spec.label} T={self.schedule.T}] epoch {epoch}/{self.config.epochs} loss={mean:.5f}±{std:.5f}"
                )

            if callback:
                callback(epoch, mean)

        return self.history


def train(
    train_items: Sequence[ChargeStabilityDiagram],
    val_items: Sequence[ChargeStabilityDiagram],
    mask_spec: MaskSpec | str,
    T: int,
    epochs: int = 30,
    seed: int = 0,
    config: TrainingConfig | None = None,
    excluded_ids: Iterable[str] = (),
) -> tuple[DenoiserParameters, TrainingHistory]:
    config = config or TrainingConfig(epochs=epochs)
    trainer = DiffusionTrainer(build_schedule(T), config, seed=seed)
    history = trainer.train(train_items, val_items, mask_spec, excluded_ids=excluded_ids)
    return trainer.params, history


# Reverse process


class Denoiser(Protocol):
    """Anything that maps (x_t, y, M, t) to an x0 estimate."""

    def __call__(self, x_t: np.ndarray, y: np.ndarray, mask: np.ndarray, t: int) -> np.ndarray: ...


def as_denoiser(params: DenoiserParameters, schedule: NoiseSchedule) -> Denoiser:
    if params.steps != schedule.T:
        raise CheckpointMismatchError(
            f"checkpoint was trained for T={params.steps} but the schedule has T={schedule.T}"
        )

    def denoise(x_t: np.ndarray, y: np.ndarray, mask: np.ndarray, t: int) -> np.ndarray:
        return denoiser_forward(params, x_t, y, mask, t)

    return denoise


def reconstruct(
    params: DenoiserParameters | Denoiser,
    y: np.ndarray,
    mask: np.ndarray | MeasurementMask,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    replace_known: bool = False,
    sample_noise: bool = True,
) -> np.ndarray:
    """
    Ancestral DDPM sampling conditioned on the sparse measurement.

    At every step the network's x0 estimate is clamped to [0, 1] and turned
    into the posterior mean of q(x_{t-1} | x_t, x0). With ``replace_known`` the
    measured pixels of x_{t-1} are overwritten by the measurement noised to
    level t-1. The result always carries ``y`` on measured pixels.
    """
    bits = mask.bits if isinstance(mask, MeasurementMask) else np.asarray(mask, dtype=bool)
    if bits.shape != y.shape:
        raise ValueError(f"measurement {y.shape} and mask {bits.shape} differ")
    denoise = as_denoiser(params, schedule) if isinstance(params, DenoiserParameters) else params
    cond = bits.astype(y.dtype)

    x = rng.standard_normal(y.shape)
    x0_hat = np.zeros(y.shape)
    for t in range(schedule.T - 1, -1, -1):
        x0_hat = np.clip(np.asarray(denoise(x, y, cond, t), dtype=np.float64), 0.0, 1.0)

        beta_t = schedule.beta[t]
        alpha_t = schedule.alpha[t]
        abar_t = schedule.alpha_bar[t]
        abar_prev = schedule.alpha_bar_prev(t)
        coef_x0 = math.sqrt(abar_prev) * beta_t / (1.0 - abar_t)
        coef_xt = math.sqrt(alpha_t) * (1.0 - abar_prev) / (1.0 - abar_t)
        mean = coef_x0 * x0_hat + coef_xt * x

        if t == 0:
            x = mean
            break

        sigma = math.sqrt(beta_t * (1.0 - abar_prev) / (1.0 - abar_t))
        z = rng.standard_normal(y.shape) if sample_noise else 0.0
        x = mean + sigma * z
        if replace_known:
            eps = rng.standard_normal(y.shape) if sample_noise else 0.0
            known = math.sqrt(abar_prev) * y + math.sqrt(1.0 - abar_prev) * eps
            x = np.where(bits, known, x)

    return np.where(bits, y, x0_hat.astype(y.dtype))
