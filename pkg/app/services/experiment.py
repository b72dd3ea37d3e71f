"""
Experiment harness: mask x diffusion-steps sweeps over a held-out test set.

For every (method, mask, steps) cell each test image is masked, reconstructed
and scored; per-image rows and per-cell aggregates are written as CSV, the
reconstructions and ridge overlays as CSD1 files.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from app.core.exceptions import CheckpointError, CsdReconError, InsufficientDataError
from app.db.checkpoints import checkpoint_name, load_checkpoint, save_checkpoint
from app.db.storage import emit_csv, load_csdc_dir, save_csdc, write_json
from app.schemas.experiment import ExperimentConfig
from app.services.baselines import BASELINES, solve_biharmonic
from app.services.csd_data import ChargeStabilityDiagram, DatasetSplit, make_splits
from app.services.diffusion import (
    DiffusionTrainer,
    NoiseSchedule,
    TrainingConfig,
    TrainingHistory,
    build_schedule,
    checkpoint_epochs,
    reconstruct,
)
from app.services.features import BinaryFeatureMap, canny_edges, frangi_ridges, ridge_overlay
from app.services.masking import MeasurementMask, apply_mask, density, make_mask, parse_mask_spec
from app.services.metrics import MetricReport, aggregate, evaluate_image
from app.services.synthetic import SyntheticConfig, generate_dataset
from app.services.timebudget import reference_inference_time, time_to_reconstruct
from app.services.unet import DenoiserParameters, UNetConfig
from app.utils.logger import get_logger
from app.utils.rng import MASK, SAMPLING, substream
from app.utils.validators import (
    assert_no_test_leak,
    format_validation_report,
    validate_metric_table,
    validate_reconstruction,
    validate_split,
)

logger = get_logger(__name__)

CELL_COLUMNS = ["method", "mask", "steps", "epoch"]


@dataclass(slots=True)
class Dataset:
    items: Dict[str, ChargeStabilityDiagram]
    split: DatasetSplit
    line_rasters: Dict[str, np.ndarray] = field(default_factory=dict)  # synthetic only

    def subset(self, ids: List[str]) -> List[ChargeStabilityDiagram]:
        return [self.items[i] for i in ids]


@dataclass(slots=True)
class ExperimentResult:
    per_image: pd.DataFrame
    cells: pd.DataFrame
    strategy: Optional[Dict[str, Any]]
    output_dir: Path
    failures: int
    histories: Dict[str, TrainingHistory] = field(default_factory=dict)


# Data


def load_dataset(config: ExperimentConfig) -> Dataset:
    """CSD1 files from ``data.path``, or a synthetic dataset when no path is set."""
    rasters: Dict[str, np.ndarray] = {}
    if config.data.path:
        csds = load_csdc_dir(config.data.path)
        if not csds:
            raise InsufficientDataError(f"no CSD1 files in {config.data.path}")
    else:
        syn = config.synthetic
        base = SyntheticConfig(
            size=syn.size,
            n_lines_family1=syn.n_lines,
            n_lines_family2=syn.n_lines,
            noise_sigma=syn.noise_sigma,
        )
        samples = generate_dataset(syn.count, base, seed=config.seed, vary=syn.vary)
        csds = [s.csd for s in samples]
        rasters = {s.csd.id: s.line_raster for s in samples}

    items = {c.id: c for c in csds}
    split = make_splits(
        list(items),
        seed=config.seed,
        test_count=config.data.test_count,
        test_ids=config.data.test_ids,
    )
    check = validate_split(split.train_ids, split.val_ids, split.test_ids)
    if not check["valid"]:
        logger.error(format_validation_report(check, "DATASET SPLIT"))
        raise InsufficientDataError("dataset split is not a partition")
    return Dataset(items=items, split=split, line_rasters=rasters)


# Reconstruction


def reconstruct_with_status(
    method: str,
    y: np.ndarray,
    mask: MeasurementMask,
    params: DenoiserParameters | None = None,
    schedule: NoiseSchedule | None = None,
    rng: np.random.Generator | None = None,
    replace_known: bool = False,
) -> tuple[np.ndarray, str | None]:
    """Reconstruction plus a note when the solver returned a degraded result."""
    if method == "biharmonic":
        result = solve_biharmonic(y, mask.bits)
        if result.degraded:
            return result.image, f"biharmonic residual {result.residual:.3e} after {result.iterations} CG iterations"
        return result.image, None
    if method in BASELINES:
        return BASELINES[method](y, mask.bits), None
    if method != "diffusion":
        raise ValueError(f"unknown method '{method}'")
    if params is None:
        raise CheckpointError("diffusion reconstruction needs trained parameters")
    schedule = schedule or build_schedule(params.steps)
    rng = rng if rng is not None else np.random.default_rng(0)
    return reconstruct(params, y, mask, schedule, rng, replace_known=replace_known), None


def reconstruct_image(
    method: str,
    y: np.ndarray,
    mask: MeasurementMask,
    params: DenoiserParameters | None = None,
    schedule: NoiseSchedule | None = None,
    rng: np.random.Generator | None = None,
    replace_known: bool = False,
) -> np.ndarray:
    recon, _ = reconstruct_with_status(method, y, mask, params, schedule, rng, replace_known)
    return recon


# Training


def _training_config(config: ExperimentConfig) -> TrainingConfig:
    t = config.training
    return TrainingConfig(
        epochs=t.epochs,
        batch_size=t.batch_size,
        lr=t.lr,
        checkpoint_every=t.checkpoint_every,
        unet=UNetConfig(base_channels=t.base_channels, levels=t.levels),
    )


def train_cell(
    dataset: Dataset,
    mask_label: str,
    steps: int,
    config: ExperimentConfig,
    callback: Callable[[int, float], None] | None = None,
) -> tuple[DenoiserParameters, TrainingHistory]:
    """Train one denoiser and persist its checkpoint series and loss history."""
    assert_no_test_leak(dataset.split.train_ids, dataset.split.test_ids)
    assert_no_test_leak(dataset.split.val_ids, dataset.split.test_ids)

    trainer = DiffusionTrainer(build_schedule(steps), _training_config(config), seed=config.seed)
    history = trainer.train(
        dataset.subset(dataset.split.train_ids),
        dataset.subset(dataset.split.val_ids),
        mask_label,
        excluded_ids=dataset.split.test_ids,
        callback=callback,
    )

    ckpt_dir = config.checkpoint_dir
    for epoch, params in history.checkpoints.items():
        save_checkpoint(params, ckpt_dir / checkpoint_name(mask_label, steps, epoch))
    save_checkpoint(trainer.params, ckpt_dir / checkpoint_name(mask_label, steps))

    out = Path(config.output_dir)
    emit_csv(
        history.to_frame(),
        out / f"training_{mask_label.replace(':', '_')}_T{steps}.csv",
        meta={"mask": mask_label, "steps": steps, "seed": config.seed},
    )
    return trainer.params, history


def obtain_denoiser(
    dataset: Dataset, mask_label: str, steps: int, config: ExperimentConfig
) -> tuple[DenoiserParameters, TrainingHistory | None]:
    """Load the final checkpoint for the cell, training it first if allowed and missing."""
    path = config.checkpoint_dir / checkpoint_name(mask_label, steps)
    if path.exists():
        logger.info(f"Using checkpoint {path}")
        return load_checkpoint(path, expected_steps=steps), None
    if not config.training.enabled:
        raise CheckpointError(f"missing checkpoint for {mask_label} T={steps}: {path}")
    logger.info(f"No checkpoint for {mask_label} T={steps}, training")
    return train_cell(dataset, mask_label, steps, config)


def epoch_denoisers(
    mask_label: str, steps: int, config: ExperimentConfig, history: TrainingHistory | None = None
) -> Dict[int, DenoiserParameters]:
    """
    Intermediate checkpoints of one cell, keyed by epoch.

    Taken from ``history`` when the cell was just trained, otherwise loaded
    from the checkpoint directory. The final epoch is left out.
    """
    final = config.training.epochs
    if history is not None:
        return {e: p for e, p in sorted(history.checkpoints.items()) if e != final}
    found = {}
    for epoch in checkpoint_epochs(final, config.training.checkpoint_every):
        if epoch == final:
            continue
        path = config.checkpoint_dir / checkpoint_name(mask_label, steps, epoch)
        if not path.exists():
            raise CheckpointError(f"missing epoch {epoch} checkpoint for {mask_label} T={steps}: {path}")
        found[epoch] = load_checkpoint(path, expected_steps=steps)
    return found


# Evaluation


@dataclass(slots=True)
class _ImageOutcome:
    row: Dict[str, Any]
    seconds: float
    n_measured: int


def _cell_label(method: str, mask_label: str, steps: int, epoch: int | None = None) -> str:
    label = f"{method}_{mask_label.replace(':', '_')}_T{steps}"
    return label if epoch is None else f"{label}_e{epoch:03d}"


def evaluate_cell(
    method: str,
    mask_label: str,
    steps: int,
    test_items: List[ChargeStabilityDiagram],
    config: ExperimentConfig,
    truth_features: List[tuple[BinaryFeatureMap, BinaryFeatureMap]],
    params: DenoiserParameters | None = None,
    epoch: int = 0,
    intermediate: bool = False,
) -> tuple[List[Dict[str, Any]], List[float], List[int]]:
    """
    Reconstruct and score every test image of one cell; failures are recorded, not raised.

    ``epoch`` labels the rows. Intermediate checkpoints write their images to
    an epoch-suffixed directory.
    """
    spec = parse_mask_spec(mask_label)
    schedule = build_schedule(steps) if method == "diffusion" else None
    image_dir = Path(config.output_dir) / "images" / _cell_label(method, mask_label, steps, epoch if intermediate else None)
    tolerance = config.evaluation.f1_tolerance
    tag = f"[{method} {spec.label} T={steps}{f' epoch {epoch}' if intermediate else ''}]"

    def failed(row: Dict[str, Any], mask: MeasurementMask, message: str, start: float) -> _ImageOutcome:
        row.update(MetricReport().as_dict())
        row["density"] = density(mask)
        row["degraded"] = False
        row["error"] = message
        return _ImageOutcome(row, time.perf_counter() - start, mask.n_measured)

    def run_one(j: int) -> _ImageOutcome:
        csd = test_items[j]
        row: Dict[str, Any] = {"method": method, "mask": spec.label, "steps": steps, "epoch": epoch, "image_id": csd.id}
        mask = make_mask(*csd.shape, spec, rng=substream_for_mask(config.seed, csd.id))
        y = apply_mask(csd.pixels, mask)
        start = time.perf_counter()
        try:
            recon, note = reconstruct_with_status(
                method,
                y,
                mask,
                params=params,
                schedule=schedule,
                rng=substream_for_sampling(config.seed, method, spec.label, steps, csd.id),
                replace_known=config.evaluation.replace_known,
            )
        except CsdReconError as e:
            logger.warning(f"{tag} {csd.id}: reconstruction failed: {e}")
            return failed(row, mask, f"reconstruction: {e}", start)
        seconds = time.perf_counter() - start

        check = validate_reconstruction(recon, y, mask.bits)
        for violation in check["violations"]:
            logger.warning(f"{tag} {csd.id}: {violation['type']}: {violation['message']}")
        if not check["valid"]:
            messages = [v["message"] for v in check["violations"] if v["severity"] == "error"]
            return failed(row, mask, "reconstruction check: " + "; ".join(messages), start)
        if note:
            logger.warning(f"{tag} {csd.id}: degraded result: {note}")

        truth_ridges, truth_edges = truth_features[j]
        evaluated = evaluate_image(recon, csd.pixels, tolerance, truth_ridges, truth_edges)
        for message in evaluated.errors:
            logger.warning(f"{tag} {csd.id}: {message}")
        row.update(evaluated.report.as_dict())
        row["density"] = density(mask)
        row["degraded"] = note is not None
        row["error"] = "; ".join(evaluated.errors)

        if config.evaluation.write_images:
            save_csdc(
                ChargeStabilityDiagram(recon.astype(np.float32), csd.v1_range, csd.v2_range, csd.id),
                image_dir / f"{csd.id}.csd",
            )
            overlay = ridge_overlay(evaluated.pred_ridges, truth_ridges, radius=max(tolerance, 1))
            save_csdc(
                ChargeStabilityDiagram(overlay, csd.v1_range, csd.v2_range, csd.id),
                image_dir / f"{csd.id}.overlay-frangi.csd",
            )
        return _ImageOutcome(row, seconds, mask.n_measured)

    workers = min(config.evaluation.workers, len(test_items)) or 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_one, range(len(test_items))))
    else:
        outcomes = [run_one(j) for j in range(len(test_items))]

    return [o.row for o in outcomes], [o.seconds for o in outcomes], [o.n_measured for o in outcomes]


def substream_for_mask(seed: int, image_id: str) -> np.random.Generator:
    return substream(seed, MASK, "eval", image_id)


def substream_for_sampling(seed: int, method: str, mask_label: str, steps: int, image_id: str) -> np.random.Generator:
    return substream(seed, SAMPLING, method, mask_label, steps, image_id)


# Reporting


def select_strategy(cells: pd.DataFrame, min_ridge_iou: float) -> Optional[Dict[str, Any]]:
    """
    Fastest diffusion (mask, steps) cell whose mean ridge IoU reaches ``min_ridge_iou``.

    Ties on total time go to the higher ridge IoU. None when no cell qualifies.
    """
    if cells.empty:
        return None
    candidates = cells[(cells["method"] == "diffusion") & (cells["iou_ridge_mean"] >= min_ridge_iou)]
    if candidates.empty:
        return None
    ordered = candidates.sort_values(["time_total", "iou_ridge_mean"], ascending=[True, False], kind="stable")
    best = ordered.iloc[0]
    return {
        "method": str(best["method"]),
        "mask": str(best["mask"]),
        "steps": int(best["steps"]),
        "iou_ridge_mean": float(best["iou_ridge_mean"]),
        "psnr_mean": float(best["psnr_mean"]),
        "time_total": float(best["time_total"]),
        "speedup": float(best["speedup"]),
        "min_ridge_iou": float(min_ridge_iou),
    }


def _cell_row(
    method: str,
    mask_label: str,
    steps: int,
    epoch: int,
    rows: List[Dict[str, Any]],
    n_measured: List[int],
    shape: tuple[int, int],
) -> Dict[str, Any]:
    reports = [MetricReport(**{k: r[k] for k in MetricReport.names()}) for r in rows]
    t_d = reference_inference_time(steps) if method == "diffusion" else 0.0
    budget = time_to_reconstruct(
        int(round(float(np.mean(n_measured)))), t_d=t_d, full_pixels=shape[0] * shape[1]
    )
    return {
        "method": method,
        "mask": mask_label,
        "steps": steps,
        "epoch": epoch,
        "images": len(rows),
        "failures": sum(1 for r in rows if r["error"]),
        "degraded": sum(1 for r in rows if r["degraded"]),
        **aggregate(reports),
        "n_p": budget.n_p,
        "time_t_d": budget.t_d,
        "time_total": budget.total,
        "speedup": budget.speedup,
    }


def run_experiment(config: ExperimentConfig, dataset: Dataset | None = None) -> ExperimentResult:
    """
    Run every cell of the sweep: |masks| x |steps| diffusion cells (when
    requested) plus |baselines| x |masks| baseline cells. Baseline cells are
    recorded with steps = 0 and epoch = 0, final diffusion cells with the
    configured epoch count. With ``evaluation.checkpoint_epochs`` every
    intermediate checkpoint adds a diffusion row of its own; only final cells
    take part in strategy selection.
    """
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = load_dataset(config)

    test_ids = dataset.split.test_ids
    if config.evaluation.max_test_images:
        test_ids = test_ids[: config.evaluation.max_test_images]
    test_items = dataset.subset(test_ids)
    shape = test_items[0].shape
    truth_features = [(frangi_ridges(c.pixels), canny_edges(c.pixels)) for c in test_items]

    logger.info(
        f"Experiment '{config.name}': {config.cell_count} cells, {len(test_items)} test images, "
        f"masks={config.masks}, steps={config.steps}, methods={config.methods}"
    )

    per_image: List[Dict[str, Any]] = []
    cells: List[Dict[str, Any]] = []  # final checkpoints and baselines
    all_cells: List[Dict[str, Any]] = []
    timing: Dict[str, Any] = {"reference": {}, "measured": {}}
    histories: Dict[str, TrainingHistory] = {}

    plan: List[tuple[str, str, int]] = []
    for mask_label in config.masks:
        if config.uses_diffusion:
            plan += [("diffusion", mask_label, steps) for steps in config.steps]
        plan += [(method, mask_label, 0) for method in config.baselines]

    def score(
        method: str,
        mask_label: str,
        steps: int,
        params: DenoiserParameters | None,
        epoch: int,
        intermediate: bool = False,
    ) -> Dict[str, Any]:
        rows, seconds, n_measured = evaluate_cell(
            method,
            mask_label,
            steps,
            test_items,
            config,
            truth_features,
            params=params,
            epoch=epoch,
            intermediate=intermediate,
        )
        per_image.extend(rows)
        cell = _cell_row(method, mask_label, steps, epoch, rows, n_measured, shape)
        all_cells.append(cell)

        key = f"{method}_{mask_label}_T{steps}" + (f"_e{epoch:03d}" if intermediate else "")
        timing["measured"][key] = {"mean_s": float(np.mean(seconds)), "max_s": float(np.max(seconds))}
        timing["reference"][key] = {"t_d": cell["time_t_d"], "total": cell["time_total"]}
        return cell

    for k, (method, mask_label, steps) in enumerate(plan, start=1):
        logger.info(f"Cell {k}/{len(plan)}: {method} {mask_label} T={steps}")
        params, epoch = None, 0
        if method == "diffusion":
            params, history = obtain_denoiser(dataset, mask_label, steps, config)
            epoch = config.training.epochs
            if history is not None:
                histories[f"{mask_label}_T{steps}"] = history
            if config.evaluation.checkpoint_epochs:
                for e, snapshot in epoch_denoisers(mask_label, steps, config, history).items():
                    cell = score(method, mask_label, steps, snapshot, e, intermediate=True)
                    logger.info(
                        f"Cell {k}/{len(plan)} epoch {e}: ridge IoU {cell['iou_ridge_mean']:.3f}, "
                        f"PSNR {cell['psnr_mean']:.2f} dB"
                    )

        cell = score(method, mask_label, steps, params, epoch)
        cells.append(cell)
        logger.info(
            f"Cell {k}/{len(plan)} done: ridge IoU {cell['iou_ridge_mean']:.3f}, "
            f"PSNR {cell['psnr_mean']:.2f} dB, {cell['failures']} failures, {cell['degraded']} degraded"
        )

    per_image_frame = pd.DataFrame(per_image, columns=[*CELL_COLUMNS, "image_id", "density", *MetricReport.names(), "degraded", "error"])
    cells_frame = pd.DataFrame(all_cells)

    check = validate_metric_table(per_image_frame, CELL_COLUMNS)
    if not check["valid"]:
        logger.error(format_validation_report(check, "METRIC TABLE"))

    meta = {"seed": config.seed, "name": config.name, "f1_tolerance_px": config.evaluation.f1_tolerance}
    emit_csv(per_image_frame, output_dir / "per_image.csv", meta=meta)
    emit_csv(cells_frame, output_dir / "cells.csv", meta=meta)

    strategy = select_strategy(pd.DataFrame(cells), config.evaluation.min_ridge_iou)
    failures = int(sum(c["failures"] for c in all_cells))
    write_json(output_dir / "timing.json", timing)
    write_json(
        output_dir / "summary.json",
        {
            "name": config.name,
            "seed": config.seed,
            "cells": len(cells),
            "epoch_cells": len(all_cells) - len(cells),
            "test_images": len(test_items),
            "failures": failures,
            "strategy": strategy,
            "config": config.model_dump(mode="json"),
        },
    )
    logger.info(f"Experiment '{config.name}' finished: {len(cells)} cells, {failures} image failures")
    return ExperimentResult(
        per_image=per_image_frame,
        cells=cells_frame,
        strategy=strategy,
        output_dir=output_dir,
        failures=failures,
        histories=histories,
    )
