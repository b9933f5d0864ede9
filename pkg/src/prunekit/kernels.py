"""Dense float32 kernels for the transformer forward pass.

Storage is always row-major float32; every reduction (dot products, row
norms, row sums) accumulates in float64 so that perplexity comparisons,
and therefore greedy argmin decisions, are not perturbed by summation
noise. Results are cast back to float32 on the way out.

All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

F32 = np.float32
F64 = np.float64


def as_f32(x) -> np.ndarray:
    """Coerce input to a C-contiguous float32 array."""
    return np.ascontiguousarray(x, dtype=F32)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of a [m x k] and b [k x n] with float64 accumulation."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.astype(F64, copy=False), b.astype(F64, copy=False))
    return out.astype(F32)


def bmm64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matmul in float64, float64 result. Used inside attention."""
    return np.matmul(a.astype(F64, copy=False), b.astype(F64, copy=False))


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D array, max-subtracted for stability.

    Rows containing -inf entries get exact zeros at those positions.
    NaN inputs propagate to NaN outputs.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D array, got shape {x.shape}")
    x64 = x.astype(F64, copy=False)
    shifted = x64 - np.max(x64, axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / np.sum(e, axis=1, keepdims=True)).astype(F32)


def rms_norm(x: np.ndarray, gamma: np.ndarray, eps: float) -> np.ndarray:
    """y_i = gamma_i * x_i / sqrt(mean(x^2) + eps), mean over the last axis."""
    x = np.asarray(x)
    gamma = np.asarray(gamma)
    if x.shape[-1] != gamma.shape[-1]:
        raise ShapeError(f"rms_norm: gamma length {gamma.shape[-1]} != feature dim {x.shape[-1]}")
    x64 = x.astype(F64, copy=False)
    ms = np.mean(np.square(x64), axis=-1, keepdims=True)
    y = x64 / np.sqrt(ms + eps) * gamma.astype(F64, copy=False)
    return y.astype(F32)


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x), the gate activation of the MLP block."""
    x64 = np.asarray(x).astype(F64, copy=False)
    return (x64 / (1.0 + np.exp(-x64))).astype(F32)


def log_softmax_rows64(x: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax computed and returned in float64.

    Feeds the negative-log-likelihood sums of the perplexity metric; kept
    in 64-bit end to end so score comparisons stay stable.
    """
    x64 = np.asarray(x).astype(F64, copy=False)
    m = np.max(x64, axis=1, keepdims=True)
    shifted = x64 - m
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    return shifted - lse
