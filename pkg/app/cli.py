"""Command-line entry point: ``csd-recon <subcommand>``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from app.core.config import settings
from app.core.exceptions import CsdReconError
from app.db.checkpoints import load_checkpoint
from app.db.storage import emit_csv, load_csdc, save_csdc
from app.schemas.experiment import STANDARD_STEPS, ExperimentConfig, load_experiment_config
from app.services.csd_data import ChargeStabilityDiagram, import_csv
from app.services.experiment import load_dataset, reconstruct_image, run_experiment, train_cell
from app.services.masking import apply_mask, density, make_mask
from app.services.metrics import evaluate_image
from app.services.synthetic import SyntheticConfig, generate_dataset
from app.services.timebudget import sweep
from app.utils.logger import get_logger
from app.utils.rng import MASK, SAMPLING, substream

logger = get_logger(__name__)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="Experiment TOML file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config value by dotted key, e.g. training.epochs=5 (repeatable)",
    )
    parser.add_argument("--mask", dest="masks", action="append", help="Mask spec grid:n or lc:nh-nv-th-tv[:random] (repeatable)")
    parser.add_argument("--steps", type=int, action="append", help="Diffusion step count (repeatable)")
    parser.add_argument("--seed", type=int, help="Run seed")
    parser.add_argument("--epochs", type=int, help="Training epochs")
    parser.add_argument("--output-dir", type=str, help="Directory for all run outputs")
    parser.add_argument("--data", type=str, help="Directory of CSD1 files (default: synthetic data)")


def _experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    overrides: Dict[str, Any] = {
        "masks": args.masks,
        "steps": args.steps,
        "seed": args.seed,
        "training.epochs": args.epochs,
        "output_dir": args.output_dir,
        "data.path": args.data,
    }
    if getattr(args, "methods", None):
        overrides["methods"] = args.methods
    if getattr(args, "workers", None):
        overrides["evaluation.workers"] = args.workers
    config = load_experiment_config(args.config, args.overrides)
    # flags win over --set, which wins over the file
    return load_experiment_config(None, {**config.model_dump(), **{k: v for k, v in overrides.items() if v is not None}})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csd-recon",
        description="Sparse charge stability diagram reconstruction: data, training, evaluation and time budgets.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Generate synthetic CSDs as CSD1 files", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    synth.add_argument("--count", type=int, default=100, help="Number of diagrams")
    synth.add_argument("--size", type=int, default=128, help="Image side length in pixels")
    synth.add_argument("--lines", type=int, default=4, help="Transition lines per family")
    synth.add_argument("--noise-sigma", type=float, default=0.05, help="White-noise standard deviation")
    synth.add_argument("--seed", type=int, default=settings.DEFAULT_SEED, help="Generator seed")
    synth.add_argument("--no-vary", action="store_true", help="Use identical device parameters for every diagram")
    synth.add_argument("--out", type=Path, required=True, help="Output directory; line rasters go to <out>/lines")

    imp = sub.add_parser("import", help="Convert measured CSV exports to CSD1", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    imp.add_argument("csv", type=Path, nargs="+", help="CSV files (comma-separated, optional header row)")
    imp.add_argument("--v1", type=float, nargs=2, default=(0.0, 1.0), metavar=("MIN", "MAX"), help="Gate 1 voltage extent")
    imp.add_argument("--v2", type=float, nargs=2, default=(0.0, 1.0), metavar=("MIN", "MAX"), help="Gate 2 voltage extent")
    imp.add_argument("--out", type=Path, required=True, help="Output directory")

    train = sub.add_parser("train", help="Train denoisers for every (mask, steps) cell", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_config_flags(train)

    rec = sub.add_parser("reconstruct", help="Reconstruct one CSD1 image from a mask", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    rec.add_argument("input", type=Path, help="Fully measured CSD1 file to mask and reconstruct")
    rec.add_argument("--mask", required=True, help="Mask spec")
    rec.add_argument("--method", choices=["diffusion", "linear", "idw", "biharmonic"], default="biharmonic", help="Reconstruction method")
    rec.add_argument("--checkpoint", type=Path, help="QDDM checkpoint (diffusion only)")
    rec.add_argument("--seed", type=int, default=settings.DEFAULT_SEED, help="Mask and sampling seed")
    rec.add_argument("--replace-known", action="store_true", help="Resample measured pixels at every reverse step")
    rec.add_argument("--out", type=Path, required=True, help="Output CSD1 file")

    ev = sub.add_parser("evaluate", help="Run the full evaluation sweep", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_config_flags(ev)
    ev.add_argument("--method", dest="methods", action="append", choices=["diffusion", "linear", "idw", "biharmonic"], help="Method (repeatable)")
    ev.add_argument("--workers", type=int, help="Threads for per-image evaluation")

    tb = sub.add_parser("timebudget", help="Idealized acquisition + inference time table", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    tb.add_argument("--mask", dest="masks", action="append", help="Mask spec (repeatable)")
    tb.add_argument("--steps", type=int, action="append", help="Diffusion step count (repeatable)")
    tb.add_argument("--size", type=int, nargs=2, default=(128, 128), metavar=("H", "W"), help="Image shape")
    tb.add_argument("--t-p", type=float, default=settings.PIXEL_TIME_S, help="Integration time per pixel in seconds")
    tb.add_argument("--csv", type=Path, help="Also write the table to this CSV file")

    return parser


# Subcommands


def cmd_synth(args: argparse.Namespace) -> int:
    base = SyntheticConfig(
        size=args.size, n_lines_family1=args.lines, n_lines_family2=args.lines, noise_sigma=args.noise_sigma
    )
    samples = generate_dataset(args.count, base, seed=args.seed, vary=not args.no_vary)
    for sample in samples:
        save_csdc(sample.csd, args.out / f"{sample.csd.id}.csd")
        raster = ChargeStabilityDiagram(sample.line_raster.astype(np.float32), id=sample.csd.id)
        save_csdc(raster, args.out / "lines" / f"{sample.csd.id}.csd")
    logger.info(f"Wrote {len(samples)} CSD1 files to {args.out}")
    return 0


def cmd_import(args: argparse.Namespace) -> int:
    for path in args.csv:
        csd = import_csv(path, tuple(args.v1), tuple(args.v2))
        save_csdc(csd, args.out / f"{csd.id}.csd")
        logger.info(f"Imported {path.name}: {csd.shape[0]}x{csd.shape[1]}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _experiment_config(args)
    dataset = load_dataset(config)
    for mask_label in config.masks:
        for steps in config.steps:
            _, history = train_cell(dataset, mask_label, steps, config)
            logger.info(
                f"Trained {mask_label} T={steps}: final loss {history.epoch_loss_mean[-1]:.5f}, "
                f"{len(history.checkpoints)} checkpoints"
            )
    return 0


def cmd_reconstruct(args: argparse.Namespace) -> int:
    csd = load_csdc(args.input)
    mask = make_mask(*csd.shape, args.mask, rng=substream(args.seed, MASK, "eval", csd.id))
    y = apply_mask(csd.pixels, mask)
    params = None
    if args.method == "diffusion":
        checkpoint = args.checkpoint or settings.CHECKPOINT_PATH
        if checkpoint is None:
            raise CsdReconError("diffusion reconstruction needs --checkpoint or CSD_CHECKPOINT_PATH")
        params = load_checkpoint(checkpoint)
    recon = reconstruct_image(
        args.method,
        y,
        mask,
        params=params,
        rng=substream(args.seed, SAMPLING, args.method, mask.spec.label, params.steps if params else 0, csd.id),
        replace_known=args.replace_known,
    )
    save_csdc(ChargeStabilityDiagram(recon.astype(np.float32), csd.v1_range, csd.v2_range, csd.id), args.out)

    evaluated = evaluate_image(recon, csd.pixels)
    logger.info(f"{args.method} on {mask.spec.label} (density {density(mask):.4f}) -> {args.out}")
    for name, value in evaluated.report.as_dict().items():
        print(f"   {name:>16}: {value:.4f}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _experiment_config(args)
    result = run_experiment(config)

    columns = ["method", "mask", "steps", "rnmse_mean", "psnr_mean", "ssim_mean", "iou_ridge_mean", "f1_ridge_mean", "time_total"]
    with pd.option_context("display.width", 160, "display.max_columns", 20):
        print(result.cells[columns].to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    if result.strategy:
        s = result.strategy
        print(
            f"\nFastest cell with ridge IoU >= {s['min_ridge_iou']}: {s['mask']} T={s['steps']} "
            f"({s['time_total']:.4f} s, {s['speedup']:.1f}x faster than a full scan, IoU {s['iou_ridge_mean']:.3f})"
        )
    else:
        print(f"\nNo diffusion cell reaches ridge IoU {config.evaluation.min_ridge_iou}")
    print(f"Outputs in {result.output_dir} ({result.failures} image failures)")
    return 0


def cmd_timebudget(args: argparse.Namespace) -> int:
    masks = args.masks or ["grid:3", "grid:5", "grid:7", "grid:9", "lc:8-8-4-4", "lc:6-6-4-4", "lc:4-4-8-8", "lc:4-4-4-4"]
    steps = args.steps or list(STANDARD_STEPS)
    table = sweep(masks, steps, shape=tuple(args.size), t_p=args.t_p)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.6g}"))
    if args.csv:
        emit_csv(table, args.csv, meta={"t_p": args.t_p})
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "import": cmd_import,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "timebudget": cmd_timebudget,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CsdReconError as e:
        logger.error(f"{args.command} failed: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
