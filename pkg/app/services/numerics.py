"""
Layer operations for the denoiser, each with an explicit backward pass.

Tensors are plain ``numpy`` arrays shaped (channels, height, width). Every
operation preserves the dtype of its input, so the float32 training path and
the float64 gradient-check path run the same code.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from app.core.exceptions import NumericFaultError, ShapeMismatchError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True, slots=True)
class LayerGrad:
    """Gradients of one layer: w.r.t. its input and w.r.t. each parameter."""

    input_grad: np.ndarray
    param_grads: list[np.ndarray] = field(default_factory=list)


@dataclass(frozen=True, slots=True)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, dtype=np.float32, lr: float = 3e-4) -> AdamState:
        return cls(step=0, m=np.zeros(n, dtype=dtype), v=np.zeros(n, dtype=dtype), lr=lr)


# Convolution


def _check_conv_shapes(x: np.ndarray, weights: np.ndarray) -> None:
    if x.ndim != 3:
        raise ShapeMismatchError(f"conv3x3 expects (C, H, W) input, got {x.shape}")
    if weights.ndim != 4 or weights.shape[2:] != (3, 3):
        raise ShapeMismatchError(f"conv3x3 expects (C_out, C_in, 3, 3) weights, got {weights.shape}")
    if weights.shape[1] != x.shape[0]:
        raise ShapeMismatchError(
            f"conv3x3 channel mismatch: input has {x.shape[0]}, weights expect {weights.shape[1]}"
        )


def _im2col(x: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (C*9, H*W) patch matrix, zero padding 1."""
    c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))  # (C, H, W, 3, 3)
    return np.ascontiguousarray(windows.transpose(0, 3, 4, 1, 2)).reshape(c * 9, h * w)


def conv3x3(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 cross-correlation with a 3x3 kernel and zero padding 1."""
    _check_conv_shapes(x, weights)
    c_out = weights.shape[0]
    if bias.shape != (c_out,):
        raise ShapeMismatchError(f"conv3x3 bias shape {bias.shape} != ({c_out},)")
    _, h, w = x.shape
    out = weights.reshape(c_out, -1) @ _im2col(x)
    out += bias[:, None]
    return out.reshape(c_out, h, w)


def conv3x3_backward(x: np.ndarray, weights: np.ndarray, output_grad: np.ndarray) -> LayerGrad:
    _check_conv_shapes(x, weights)
    c_out, c_in = weights.shape[:2]
    _, h, w = x.shape
    if output_grad.shape != (c_out, h, w):
        raise ShapeMismatchError(
            f"conv3x3_backward output_grad {output_grad.shape} != {(c_out, h, w)}"
        )

    g = output_grad.reshape(c_out, h * w)
    weight_grad = (g @ _im2col(x).T).reshape(weights.shape)
    bias_grad = g.sum(axis=1)

    cols = (weights.reshape(c_out, -1).T @ g).reshape(c_in, 3, 3, h, w)
    padded = np.zeros((c_in, h + 2, w + 2), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            padded[:, di : di + h, dj : dj + w] += cols[:, di, dj]

    return LayerGrad(input_grad=padded[:, 1:-1, 1:-1].copy(), param_grads=[weight_grad, bias_grad])


# Max pooling


@numba.njit(cache=True)
def _maxpool_kernel(x, out, arg):
    c_dim, h2, w2 = out.shape
    for c in range(c_dim):
        for i in range(h2):
            for j in range(w2):
                best = x[c, 2 * i, 2 * j]
                k = 0
                for d in range(1, 4):
                    v = x[c, 2 * i + d // 2, 2 * j + d % 2]
                    if v > best:
                        best = v
                        k = d
                out[c, i, j] = best
                arg[c, i, j] = k


@numba.njit(cache=True)
def _maxpool_backward_kernel(g, arg, dx):
    c_dim, h2, w2 = g.shape
    for c in range(c_dim):
        for i in range(h2):
            for j in range(w2):
                k = arg[c, i, j]
                dx[c, 2 * i + k // 2, 2 * j + k % 2] += g[c, i, j]


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling. Returns the pooled tensor and the in-block winner index (0..3, row-major)."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"maxpool2x2 needs even spatial size, got {h}x{w}")
    out = np.empty((c, h // 2, w // 2), dtype=x.dtype)
    arg = np.empty((c, h // 2, w // 2), dtype=np.int8)
    _maxpool_kernel(np.ascontiguousarray(x), out, arg)
    return out, arg


def maxpool2x2_backward(output_grad: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    if output_grad.shape != argmax.shape:
        raise ShapeMismatchError(f"maxpool2x2_backward grad {output_grad.shape} != argmax {argmax.shape}")
    c, h2, w2 = output_grad.shape
    dx = np.zeros((c, 2 * h2, 2 * w2), dtype=output_grad.dtype)
    _maxpool_backward_kernel(np.ascontiguousarray(output_grad), argmax, dx)
    return dx


# Bilinear upsampling


@lru_cache(maxsize=32)
def _upsample_matrix(n: int) -> np.ndarray:
    """(2n, n) interpolation matrix, half-pixel centers, clamped at the borders."""
    matrix = np.zeros((2 * n, n), dtype=np.float64)
    for i in range(2 * n):
        src = min(max((i + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        matrix[i, lo] += 1.0 - frac
        matrix[i, hi] += frac
    matrix.setflags(write=False)
    return matrix


def bilinear_upsample2x(x: np.ndarray) -> np.ndarray:
    _, h, w = x.shape
    rows = _upsample_matrix(h).astype(x.dtype, copy=False)
    cols = _upsample_matrix(w).astype(x.dtype, copy=False)
    return rows @ x @ cols.T


def bilinear_upsample2x_backward(output_grad: np.ndarray) -> np.ndarray:
    _, h2, w2 = output_grad.shape
    if h2 % 2 or w2 % 2:
        raise ShapeMismatchError(f"upsample gradient must have even size, got {h2}x{w2}")
    rows = _upsample_matrix(h2 // 2).astype(output_grad.dtype, copy=False)
    cols = _upsample_matrix(w2 // 2).astype(output_grad.dtype, copy=False)
    return rows.T @ output_grad @ cols


# Activations and dense layers


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, output_grad: np.ndarray) -> np.ndarray:
    if x.shape != output_grad.shape:
        raise ShapeMismatchError(f"relu_backward shapes differ: {x.shape} vs {output_grad.shape}")
    return output_grad * (x > 0)


def gelu(v: np.ndarray) -> np.ndarray:
    """Exact GELU, x * Phi(x)."""
    return v * (0.5 * (1.0 + erf(v / _SQRT2))).astype(v.dtype, copy=False)


def gelu_backward(v: np.ndarray, output_grad: np.ndarray) -> np.ndarray:
    if v.shape != output_grad.shape:
        raise ShapeMismatchError(f"gelu_backward shapes differ: {v.shape} vs {output_grad.shape}")
    cdf = 0.5 * (1.0 + erf(v / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
    return (output_grad * (cdf + v * pdf)).astype(v.dtype, copy=False)


def dense(v: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if weights.ndim != 2 or weights.shape[1] != v.shape[0] or bias.shape != (weights.shape[0],):
        raise ShapeMismatchError(
            f"dense shapes inconsistent: v {v.shape}, W {weights.shape}, b {bias.shape}"
        )
    return weights @ v + bias


def dense_backward(v: np.ndarray, weights: np.ndarray, output_grad: np.ndarray) -> LayerGrad:
    if output_grad.shape != (weights.shape[0],) or v.shape != (weights.shape[1],):
        raise ShapeMismatchError(
            f"dense_backward shapes inconsistent: v {v.shape}, W {weights.shape}, g {output_grad.shape}"
        )
    return LayerGrad(
        input_grad=weights.T @ output_grad,
        param_grads=[np.outer(output_grad, v), output_grad.copy()],
    )


# Loss


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


def mse_backward(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    return (2.0 / pred.size) * (pred - target)


# Optimizer


def adam_step(
    params: np.ndarray, grads: np.ndarray, state: AdamState
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Rejects non-finite gradients without touching the state."""
    if not (params.shape == grads.shape == state.m.shape == state.v.shape):
        raise ShapeMismatchError(
            f"adam_step length mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    if not np.all(np.isfinite(grads)):
        raise NumericFaultError(f"non-finite gradient at Adam step {state.step + 1}")

    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    update = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)

    new_state = AdamState(
        step=step,
        m=m.astype(state.m.dtype, copy=False),
        v=v.astype(state.v.dtype, copy=False),
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
    )
    return (params - update).astype(params.dtype, copy=False), new_state
