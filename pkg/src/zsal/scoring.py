"""Anomaly probabilities from cosine similarity to the normal/abnormal tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor_core import ShapeError

DEFAULT_TAU = 100.0


@dataclass(frozen=True)
class AnomalyMap:
    scores: np.ndarray  # (H, W) in [0, 1]
    grid: tuple[int, int]


def _two_way_softmax(logit_abnormal: np.ndarray, logit_normal: np.ndarray) -> np.ndarray:
    """exp(a) / (exp(n) + exp(a)) evaluated as a logistic of the difference."""
    d = logit_abnormal - logit_normal
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def score_rows(rows: np.ndarray, t_plus: np.ndarray, t_minus: np.ndarray, tau: float) -> np.ndarray:
    """Per-row anomaly probability; rows are assumed unit-norm."""
    rows = np.atleast_2d(rows)
    if rows.shape[0] == 0:
        return np.zeros(0, dtype=rows.dtype)
    return _two_way_softmax(tau * (rows @ t_minus), tau * (rows @ t_plus))


def score_image(v: np.ndarray, pair, tau: float = DEFAULT_TAU) -> float:
    return float(score_rows(v[None, :], pair.t_plus, pair.t_minus, tau)[0])


def score_patches(patches: np.ndarray, pair, tau: float = DEFAULT_TAU) -> np.ndarray:
    return score_rows(patches, pair.t_plus, pair.t_minus, tau)


def _align_corners_matrix(n_in: int, n_out: int) -> np.ndarray:
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        mat[:, 0] = 1.0
        return mat
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    mat[rows, lo] = 1.0 - frac
    mat[rows, lo + 1] += frac
    return mat


def upsample_bilinear(grid_scores: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with corner alignment (input corners map to output corners)."""
    rh = _align_corners_matrix(grid_scores.shape[0], out_h)
    rw = _align_corners_matrix(grid_scores.shape[1], out_w)
    return rh @ grid_scores.astype(np.float64) @ rw.T


def build_map(
    patch_scores: np.ndarray,
    grid: tuple[int, int],
    out_size: tuple[int, int],
    smooth_sigma: float = 0.0,
) -> AnomalyMap:
    rows, cols = grid
    patch_scores = np.asarray(patch_scores)
    if rows * cols != patch_scores.size:
        raise ShapeError(f"grid {rows}x{cols} does not hold {patch_scores.size} patch scores")
    field = upsample_bilinear(patch_scores.reshape(rows, cols), *out_size)
    if smooth_sigma > 0:
        field = gaussian_filter(field, sigma=smooth_sigma, mode="nearest")
    return AnomalyMap(np.clip(field, 0.0, 1.0).astype(np.float32), (rows, cols))
