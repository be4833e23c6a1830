"""Single-image localization: encode, score, optionally adapt, build the map."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .image_io import preprocess, preprocess_array
from .prompts import TextTokenPair
from .scoring import AnomalyMap, build_map, score_image, score_patches
from .tensor_core import l2_normalize_rows
from .tta import TraceRow, TtaConfig, run_tta
from .vision import encode_image
from .weights_io import ModelConfig, WeightStore


@dataclass(frozen=True)
class Localization:
    image_score: float
    patch_scores: np.ndarray
    anomaly_map: AnomalyMap
    trace: list[TraceRow] | None = None


def localize_array(
    image: np.ndarray,
    out_size: tuple[int, int],
    store: WeightStore,
    config: ModelConfig,
    pair: TextTokenPair,
    mode: str = "vv_multi",
    tta: TtaConfig | None = None,
    tau: float | None = None,
    smooth_sigma: float = 0.0,
    fuse_max: bool = False,
) -> Localization:
    """Localize on an already preprocessed (3, S, S) image.

    ``tau`` defaults to the model's temperature. Scoring and TTA always share
    it; ``tta.tau`` is ignored here.
    """
    tau = config.temperature if tau is None else tau
    out = encode_image(image, store, config, mode)
    s_ad = score_image(out.v, pair, tau)
    trace = None
    if tta is None:
        patch_scores = score_patches(out.patches, pair, tau)
    else:
        result = run_tta(out.patches, pair, replace(tta, tau=tau))
        patch_scores = score_patches(l2_normalize_rows(result.adapted), pair, tau)
        trace = result.trace
    amap = build_map(patch_scores, out.grid, out_size, smooth_sigma)
    if fuse_max:
        s_ad = 0.5 * (s_ad + float(patch_scores.max()))
    return Localization(s_ad, patch_scores, amap, trace)


def localize(path, store, config, pair, **kwargs) -> Localization:
    image, size = preprocess(path, config)
    return localize_array(image, size, store, config, pair, **kwargs)


def localize_rgb(rgb: np.ndarray, store, config, pair, **kwargs) -> Localization:
    return localize_array(preprocess_array(rgb, config), rgb.shape[:2], store, config, pair, **kwargs)
