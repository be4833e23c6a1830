"""AUROC, F1Max, AUPR and PRO for image- and pixel-level evaluation.

Metrics that are undefined for the given labels (a single class present, no
positives, an empty mask) return ``None``.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import label as label_components
from scipy.stats import rankdata

EXACT_LIMIT = 10**6
QUANTILE_THRESHOLDS = 10**4
EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _flat(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(bool)


def threshold_mode(n: int) -> str:
    return "exact" if n <= EXACT_LIMIT else "quantile"


def auroc(scores, labels) -> float | None:
    """Mann-Whitney U / (n_pos * n_neg), ties counted one half."""
    s, y = _flat(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _sweep(s, y):
    """Cumulative (tp, fp) when predicting positive for score >= each unique score,
    highest threshold first."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    last_of_group = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    return tp[last_of_group], fp[last_of_group]


def f1max(scores, labels) -> float | None:
    s, y = _flat(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    if threshold_mode(s.size) == "exact":
        tp, fp = _sweep(s, y)
    else:
        thresholds = np.quantile(s, np.linspace(0.0, 1.0, QUANTILE_THRESHOLDS))
        order = np.sort(s)
        pos_sorted = np.sort(s[y])
        above = s.size - np.searchsorted(order, thresholds, side="left")
        tp = pos_sorted.size - np.searchsorted(pos_sorted, thresholds, side="left")
        fp = above - tp
    f1 = 2.0 * tp / (tp + fp + n_pos)
    return float(f1.max())


def aupr(scores, labels) -> float | None:
    """Average precision: sum over thresholds of (R_k - R_{k-1}) * P_k."""
    s, y = _flat(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    tp, fp = _sweep(s, y)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def pro(score_maps, masks, fpr_limit: float = 0.3) -> float | None:
    """Per-region overlap integrated over FPR in [0, fpr_limit], normalized.

    ``score_maps``/``masks`` are one (H, W) pair or sequences of such pairs. Regions are
    8-connected components of each mask; FPR counts all negative pixels.
    Between sweep points the curve holds the overlap of the higher threshold,
    so a group of tied scores contributes nothing until it is fully admitted.
    """
    if isinstance(score_maps, np.ndarray) and score_maps.ndim == 2:
        score_maps, masks = [score_maps], [masks]
    maps = [np.asarray(m, dtype=np.float64) for m in score_maps]
    gts = [np.asarray(g).astype(bool) for g in masks]
    if len(maps) != len(gts) or any(m.shape != g.shape or m.ndim != 2 for m, g in zip(maps, gts)):
        raise ValueError("score maps and masks must be matching (H, W) pairs")
    if not 0 < fpr_limit <= 1:
        raise ValueError("fpr_limit must lie in (0, 1]")

    weights = []
    n_regions = 0
    for gt in gts:
        w = np.zeros(gt.shape, dtype=np.float64)
        labelled, count = label_components(gt, structure=EIGHT_CONNECTED)
        if count:
            sizes = np.bincount(labelled.ravel())
            w[gt] = 1.0 / sizes[labelled[gt]]
        weights.append(w.ravel())
        n_regions += count
    negatives = np.concatenate([~g.ravel() for g in gts])
    n_neg = int(negatives.sum())
    if n_regions == 0 or n_neg == 0:
        return None
    weights = np.concatenate(weights) / n_regions

    s = np.concatenate([m.ravel() for m in maps])
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    overlap = np.cumsum(weights[order])
    fpr = np.cumsum(negatives[order]) / n_neg
    last_of_group = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    overlap, fpr = overlap[last_of_group], fpr[last_of_group]

    # left-held step curve starting from the empty prediction at (0, 0)
    xs = np.r_[0.0, fpr]
    ys = np.r_[0.0, overlap]
    widths = np.diff(np.minimum(xs, fpr_limit))
    area = float(np.sum(widths * ys[:-1]))
    return area / fpr_limit
