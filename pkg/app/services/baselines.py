"""
Classical interpolation baselines: piecewise-linear (Delaunay), inverse
distance weighting and biharmonic (discrete thin-plate) inpainting.

All three take the sparse measurement ``y`` and the boolean mask ``M`` and
return a full image that equals ``y`` on every measured pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import LinearNDInterpolator
from scipy.sparse.linalg import cg, spsolve
from scipy.spatial import QhullError, cKDTree

from app.core.exceptions import InsufficientDataError, ShapeMismatchError
from app.utils.logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True, slots=True)
class IdwConfig:
    k: int = 8
    p: float = 2.0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"IDW needs k >= 1, got {self.k}")
        if self.p <= 0:
            raise ValueError(f"IDW needs p > 0, got {self.p}")


@dataclass(frozen=True, slots=True)
class BiharmonicResult:
    image: np.ndarray
    residual: float  # ||A x - b|| / ||b|| on the unknowns
    iterations: int
    degraded: bool


def _measured(y: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    bits = np.asarray(mask, dtype=bool)
    if bits.shape != y.shape or y.ndim != 2:
        raise ShapeMismatchError(f"measurement {y.shape} and mask {bits.shape} must be equal 2-D shapes")
    coords = np.argwhere(bits)  # row-major order
    values = y[bits].astype(np.float64)
    return bits, coords, values


def _finish(y: np.ndarray, bits: np.ndarray, filled: np.ndarray) -> np.ndarray:
    return np.where(bits, y, filled.astype(y.dtype))


def interp_linear(y: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """
    Barycentric interpolation over a Delaunay triangulation of the measured
    pixels; pixels outside the convex hull take the nearest measured value.
    """
    bits, coords, values = _measured(y, mask)
    if len(coords) < 3:
        raise InsufficientDataError(f"linear interpolation needs >= 3 measured points, got {len(coords)}")
    centered = coords - coords.mean(axis=0)
    if np.linalg.matrix_rank(centered.astype(np.float64)) < 2:
        raise InsufficientDataError("linear interpolation needs non-collinear measured points")

    h, w = y.shape
    query = np.argwhere(~bits)
    filled = np.zeros((h, w), dtype=np.float64)
    if len(query):
        try:
            interpolator = LinearNDInterpolator(coords.astype(np.float64), values, fill_value=np.nan)
        except QhullError as e:
            raise InsufficientDataError(f"Delaunay triangulation failed: {e}") from e
        estimate = interpolator(query.astype(np.float64))
        outside = np.isnan(estimate)
        if outside.any():
            _, nearest = cKDTree(coords).query(query[outside], k=1)
            estimate[outside] = values[nearest]
        filled[query[:, 0], query[:, 1]] = estimate
    return _finish(y, bits, filled)


def interp_idw(y: np.ndarray, mask: np.ndarray, config: IdwConfig | None = None) -> np.ndarray:
    """
    Inverse distance weighting over the k nearest measured pixels.

    Neighbor ties are broken by row-major index of the measured pixel.
    """
    config = config or IdwConfig()
    bits, coords, values = _measured(y, mask)
    if len(coords) == 0:
        raise InsufficientDataError("IDW needs at least one measured point")

    h, w = y.shape
    query = np.argwhere(~bits)
    filled = np.zeros((h, w), dtype=np.float64)
    if len(query):
        k = min(config.k, len(coords))
        tree = cKDTree(coords)
        # widen until every candidate tied with the k-th neighbor is fetched
        k_fetch = min(len(coords), 4 * k)
        while True:
            dist, idx = tree.query(query, k=k_fetch)
            dist = np.asarray(dist).reshape(len(query), k_fetch)
            idx = np.asarray(idx).reshape(len(query), k_fetch)
            rounded = np.round(dist, 9)
            if k_fetch == len(coords) or np.all(rounded[:, k - 1] < rounded[:, -1]):
                break
            k_fetch = min(len(coords), 2 * k_fetch)
        order = np.lexsort((idx, rounded), axis=1)[:, :k]
        dist = np.take_along_axis(dist, order, axis=1)
        idx = np.take_along_axis(idx, order, axis=1)

        weights = 1.0 / dist**config.p
        estimate = (weights * values[idx]).sum(axis=1) / weights.sum(axis=1)
        filled[query[:, 0], query[:, 1]] = estimate
    return _finish(y, bits, filled)


# Biharmonic


def _second_difference(n: int) -> sp.csr_matrix:
    """(n-2, n) operator u[i-1] - 2u[i] + u[i+1] for i = 1..n-2."""
    if n < 3:
        return sp.csr_matrix((0, n))
    return sp.diags([1.0, -2.0, 1.0], [0, 1, 2], shape=(n - 2, n), format="csr")


def bending_operator(h: int, w: int) -> sp.csr_matrix:
    """
    Normal-equation matrix of the discrete bending energy on an h x w grid.

    Energy = sum of the squared 5-point Laplacian over pixels where the full
    stencil fits, plus squared tangential second differences along the frame
    edges. Away from the border the matrix rows are the 13-point biharmonic
    stencil (the squared 5-point Laplacian). Affine and bilinear fields have
    zero energy.
    """
    eye_h, eye_w = sp.identity(h, format="csr"), sp.identity(w, format="csr")
    d_h, d_w = _second_difference(h), _second_difference(w)

    interior_rows = sp.identity(h, format="csr")[1 : h - 1] if h > 2 else sp.csr_matrix((0, h))
    interior_cols = sp.identity(w, format="csr")[1 : w - 1] if w > 2 else sp.csr_matrix((0, w))
    laplacian = sp.kron(d_h, interior_cols) + sp.kron(interior_rows, d_w)

    edge_rows = eye_h[[0, h - 1]] if h > 1 else eye_h
    edge_cols = eye_w[[0, w - 1]] if w > 1 else eye_w
    along_top_bottom = sp.kron(edge_rows, d_w)  # second differences along rows 0 and h-1
    along_left_right = sp.kron(d_h, edge_cols)  # second differences along cols 0 and w-1

    terms = [laplacian, along_top_bottom, along_left_right]
    operator = sum((t.T @ t for t in terms if t.shape[0]), sp.csr_matrix((h * w, h * w)))
    return sp.csr_matrix(operator)


def _membrane_operator(h: int, w: int) -> sp.csr_matrix:
    """Graph Laplacian with free (reflecting) borders, used only to regularize degenerate inputs."""
    def path(n: int) -> sp.csr_matrix:
        if n < 2:
            return sp.csr_matrix((0, n))
        return sp.diags([-1.0, 1.0], [0, 1], shape=(n - 1, n), format="csr")

    grad = sp.vstack([sp.kron(path(h), sp.identity(w)), sp.kron(sp.identity(h), path(w))])
    return sp.csr_matrix(grad.T @ grad)


def _bilinear_rank(coords: np.ndarray) -> int:
    basis = np.column_stack(
        [np.ones(len(coords)), coords[:, 0], coords[:, 1], coords[:, 0] * coords[:, 1]]
    ).astype(np.float64)
    return int(np.linalg.matrix_rank(basis))


def solve_biharmonic(
    y: np.ndarray,
    mask: np.ndarray,
    rtol: float = 1e-6,
    max_iter: int = 100_000,
) -> BiharmonicResult:
    """
    Minimize the discrete bending energy with measured pixels as Dirichlet data.

    The reduced system A_uu u = -A_uk y_k is symmetric positive definite when
    the measured pixels pin down the bilinear null space. It is factorized
    directly, and if the relative residual misses ``rtol`` it is refined with
    conjugate gradients for up to ``max_iter`` iterations.
    """
    bits, coords, values = _measured(y, mask)
    if len(coords) == 0:
        raise InsufficientDataError("biharmonic inpainting needs at least one measured point")
    h, w = y.shape
    flat = bits.ravel()
    unknown = np.flatnonzero(~flat)
    known = np.flatnonzero(flat)
    filled = np.zeros(h * w, dtype=np.float64)
    filled[known] = y.ravel()[known]
    if len(unknown) == 0:
        return BiharmonicResult(_finish(y, bits, filled.reshape(h, w)), 0.0, 0, False)

    operator = bending_operator(h, w)
    if _bilinear_rank(coords) < 4:
        logger.warning(
            f"Biharmonic: {len(coords)} measured points leave the bilinear null space open, "
            "adding a small membrane term"
        )
        operator = operator + 1e-6 * _membrane_operator(h, w)

    a_uu = operator[unknown][:, unknown].tocsc()
    rhs = -(operator[unknown][:, known] @ filled[known])
    rhs_norm = float(np.linalg.norm(rhs))
    scale = rhs_norm if rhs_norm > 0 else 1.0

    solution = spsolve(a_uu, rhs)
    residual = float(np.linalg.norm(a_uu @ solution - rhs)) / scale
    iterations = 0
    if not np.all(np.isfinite(solution)) or residual > rtol:
        start = solution if np.all(np.isfinite(solution)) else np.zeros_like(rhs)
        counter = {"n": 0}

        def count(_):
            counter["n"] += 1

        solution, _ = cg(a_uu, rhs, x0=start, rtol=rtol, atol=0.0, maxiter=max_iter, callback=count)
        iterations = counter["n"]
        residual = float(np.linalg.norm(a_uu @ solution - rhs)) / scale

    degraded = residual > rtol
    if degraded:
        logger.warning(f"Biharmonic solve did not converge: residual {residual:.3e} after {iterations} CG iterations")

    filled[unknown] = solution
    return BiharmonicResult(
        image=_finish(y, bits, filled.reshape(h, w)),
        residual=residual,
        iterations=iterations,
        degraded=degraded,
    )


def interp_biharmonic(y: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return solve_biharmonic(y, mask).image


def biharmonic_residual(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """13-point biharmonic stencil applied on unmeasured pixels at least 2 px from the frame."""
    u = np.asarray(image, dtype=np.float64)
    h, w = u.shape
    lap = np.zeros_like(u)
    lap[1:-1, 1:-1] = u[:-2, 1:-1] + u[2:, 1:-1] + u[1:-1, :-2] + u[1:-1, 2:] - 4.0 * u[1:-1, 1:-1]
    bilap = np.zeros_like(u)
    bilap[2:-2, 2:-2] = (
        lap[1:-3, 2:-2] + lap[3:-1, 2:-2] + lap[2:-2, 1:-3] + lap[2:-2, 3:-1] - 4.0 * lap[2:-2, 2:-2]
    )
    region = np.zeros((h, w), dtype=bool)
    region[2:-2, 2:-2] = True
    return np.where(region & ~np.asarray(mask, dtype=bool), bilap, 0.0)


BASELINES = {
    "linear": interp_linear,
    "idw": interp_idw,
    "biharmonic": interp_biharmonic,
}
