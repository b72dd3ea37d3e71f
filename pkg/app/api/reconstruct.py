import math

import numpy as np
from fastapi import APIRouter, HTTPException

from app.core.config import settings
from app.core.exceptions import CheckpointError, CsdReconError, MaskSpecError
from app.db.checkpoints import load_checkpoint
from app.schemas.reconstruction import (
    MaskRequest,
    MaskResponse,
    ReconstructRequest,
    ReconstructResponse,
    TimeBudgetRequest,
    TimeBudgetResponse,
)
from app.services.experiment import reconstruct_image
from app.services.masking import apply_mask, density, expected_measured_count, make_mask, parse_mask_spec
from app.services.metrics import evaluate_image
from app.services.timebudget import reference_inference_time, time_to_reconstruct
from app.utils.logger import get_logger
from app.utils.rng import MASK, SAMPLING, substream

logger = get_logger(__name__)
router = APIRouter(prefix="/api", tags=["reconstruction"])


def _finite_or_none(value: float):
    return value if math.isfinite(value) else None


def _build_mask(spec_text: str, h: int, w: int, seed: int):
    if h * w > settings.MAX_API_PIXELS:
        raise HTTPException(status_code=413, detail=f"{h}x{w} exceeds the {settings.MAX_API_PIXELS}-pixel limit")
    try:
        spec = parse_mask_spec(spec_text)
        return make_mask(h, w, spec, rng=substream(seed, MASK, "api"))
    except MaskSpecError as e:
        raise HTTPException(status_code=422, detail=str(e))


@router.post("/masks", response_model=MaskResponse)
def describe_mask(payload: MaskRequest):
    """Measured-pixel count and density of a mask spec on an H x W frame."""
    mask = _build_mask(payload.spec, payload.height, payload.width, payload.seed)
    try:
        expected = expected_measured_count(payload.height, payload.width, mask.spec)
    except MaskSpecError:
        expected = None  # randomized line cuts
    return MaskResponse(
        spec=mask.spec.label,
        height=payload.height,
        width=payload.width,
        n_measured=mask.n_measured,
        density=density(mask),
        expected_measured=expected,
        bits=mask.bits.tolist() if payload.include_bits else None,
    )


@router.post("/timebudget", response_model=TimeBudgetResponse)
def time_budget(payload: TimeBudgetRequest):
    """
    T_total = n_p * t_p + t_d.

    n_p comes from ``mask`` (on height x width) or directly from ``n_p``;
    t_d from ``t_d`` or, failing that, the reference time for ``steps``.
    """
    if payload.t_d is not None:
        t_d = payload.t_d
    elif payload.steps is not None:
        t_d = reference_inference_time(payload.steps)
    else:
        t_d = 0.0

    full = payload.height * payload.width
    if payload.mask is not None:
        mask = _build_mask(payload.mask, payload.height, payload.width, seed=0)
        budget = time_to_reconstruct(mask, payload.t_p, t_d)
    elif payload.n_p is not None:
        budget = time_to_reconstruct(payload.n_p, payload.t_p, t_d, full_pixels=full)
    else:
        raise HTTPException(status_code=422, detail="either 'mask' or 'n_p' is required")
    result = budget.as_dict()
    result["speedup"] = _finite_or_none(result["speedup"])
    return TimeBudgetResponse(**result)


@router.post("/reconstruct", response_model=ReconstructResponse)
def reconstruct_csd(payload: ReconstructRequest):
    """
    Mask a fully measured image, reconstruct it and score the result
    against the input.
    """
    try:
        pixels = np.asarray(payload.pixels, dtype=np.float32)
    except ValueError:
        raise HTTPException(status_code=422, detail="'pixels' rows must all have the same length")
    if pixels.ndim != 2 or pixels.size == 0:
        raise HTTPException(status_code=422, detail="'pixels' must be a non-empty rectangular 2-D array")
    if not np.all(np.isfinite(pixels)):
        raise HTTPException(status_code=422, detail="'pixels' contains non-finite values")
    h, w = pixels.shape
    mask = _build_mask(payload.mask, h, w, payload.seed)
    y = apply_mask(pixels, mask)

    params = None
    if payload.method == "diffusion":
        if not settings.CHECKPOINT_PATH:
            raise HTTPException(status_code=400, detail="diffusion requires CSD_CHECKPOINT_PATH to be configured")
        try:
            params = load_checkpoint(settings.CHECKPOINT_PATH)
        except CheckpointError as e:
            logger.error(f"Checkpoint load failed: {e}")
            raise HTTPException(status_code=500, detail=f"checkpoint unavailable: {e}")

    try:
        recon = reconstruct_image(
            payload.method,
            y,
            mask,
            params=params,
            rng=substream(payload.seed, SAMPLING, "api"),
            replace_known=payload.replace_known,
        )
    except CsdReconError as e:
        raise HTTPException(status_code=400, detail=str(e))

    metrics, errors = None, []
    if payload.evaluate:
        evaluated = evaluate_image(recon, pixels)
        metrics = {k: _finite_or_none(v) for k, v in evaluated.report.as_dict().items()}
        errors = evaluated.errors

    logger.info(f"Reconstructed {h}x{w} with {payload.method} on {mask.spec.label}")
    return ReconstructResponse(
        method=payload.method,
        mask=mask.spec.label,
        n_measured=mask.n_measured,
        density=density(mask),
        pixels=recon.astype(np.float64).tolist(),
        metrics=metrics,
        errors=errors,
    )
