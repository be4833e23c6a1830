"""Dense float32 tensor math shared by every other module.

Tensors are plain ``numpy`` arrays. Public ops return float32 unless the caller
hands in float64 (the gradient-check path), in which case float64 is kept.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _float(x) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype == np.float64:
        return x
    return x.astype(np.float32, copy=False)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(np.ravel(x)))[0])
        raise NonFiniteError(f"{what} has a non-finite value at flat index {bad}")
    return x


def matmul(a, b, accumulate64: bool = False) -> np.ndarray:
    """Matrix product ``a @ b`` with shape checking.

    ``accumulate64`` computes in float64 and rounds the result back to the
    input precision.
    """
    a, b = _float(a), _float(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if accumulate64:
        out_dtype = np.result_type(a, b)
        return check_finite((a.astype(np.float64) @ b.astype(np.float64)).astype(out_dtype), "matmul output")
    return check_finite(a @ b, "matmul output")


def linear(x, weight, bias=None) -> np.ndarray:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    x, weight = _float(x), _float(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    y = x @ weight.T
    if bias is not None:
        y = y + _float(bias)
    return y


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> np.ndarray:
    x = _float(x)
    c = x.shape[-1]
    # scalar gain/bias broadcast over the channel axis
    gamma, beta = (np.broadcast_to(_float(p), (c,)) if np.ndim(p) == 0 else _float(p) for p in (gamma, beta))
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm: last axis {c} does not match gamma {gamma.shape} / beta {beta.shape}"
        )
    # row statistics in float64: float32 means of offset rows lose ~1e-5
    wide = x.astype(np.float64)
    centered = wide - wide.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    y = (centered / np.sqrt(var + eps)).astype(x.dtype) * gamma + beta
    return check_finite(y, "layer_norm output")


def softmax_rows(x) -> np.ndarray:
    x = _float(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return check_finite(e / e.sum(axis=-1, keepdims=True), "softmax input")


def l2_normalize_rows(x) -> np.ndarray:
    x = _float(x)
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    small = norms.reshape(-1) < NORM_EPS
    if np.any(small):
        raise DegenerateInputError(
            f"cannot normalize row {int(np.flatnonzero(small)[0])}: norm below {NORM_EPS}"
        )
    return check_finite(x / norms, "l2_normalize_rows input")


def gelu(x, variant: str = "erf") -> np.ndarray:
    """GELU activation. ``variant`` is ``erf`` (exact), ``tanh`` or ``quick``."""
    x = _float(x)
    if variant == "erf":
        y = 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))
    elif variant == "tanh":
        y = 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))
    elif variant == "quick":
        y = x / (1.0 + np.exp(-1.702 * x))
    else:
        raise ValueError(f"unknown gelu variant {variant!r}")
    return check_finite(y.astype(x.dtype, copy=False), "gelu input")
