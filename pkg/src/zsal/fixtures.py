"""Seeded synthetic fixtures: planted-anomaly images and matching text tokens.

Nothing here needs pretrained weights. The token pair is built without
looking at the ground truth: the "normal" direction leans toward the mean
patch token of the image and the "abnormal" one away from it, so patches
that look unlike the rest of the image score high.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .prompts import TextTokenPair, average_tokens
from .rng import SplitMix64
from .weights_io import ModelConfig, WeightStore, make_synthetic_model

FIXTURE_CONFIG = ModelConfig.tiny(
    image_size=64,
    patch_size=8,
    vision_width=32,
    vision_heads=4,
    embed_dim=16,
    vv_start_layer=0,  # both layers adapted, so vv_multi differs from vv_last
)


def planted_image(
    seed: int,
    size: int = 64,
    patch: int = 8,
    anomaly_patches: tuple[tuple[int, int], ...] = ((2, 5), (2, 6), (3, 5), (3, 6)),
) -> tuple[np.ndarray, np.ndarray]:
    """(H, W, 3) uint8 image with a smooth background texture and a
    high-contrast pattern over ``anomaly_patches`` (grid row, col); returns the
    image and the binary mask of the planted pixels."""
    gen = SplitMix64(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = gen.uniform(3) * 2 * np.pi
    base = 0.5 + 0.08 * np.sin(2 * np.pi * xx / 23.0 + phase[0]) * np.cos(2 * np.pi * yy / 29.0 + phase[1])
    rgb = np.stack([base, base * 0.95 + 0.02, base * 0.9 + 0.04], axis=-1)
    rgb += 0.02 * gen.normal(rgb.size).reshape(rgb.shape)
    mask = np.zeros((size, size), dtype=np.uint8)
    checker = ((xx // 2 + yy // 2) % 2).astype(np.float64)
    for r, c in anomaly_patches:
        sl = (slice(r * patch, (r + 1) * patch), slice(c * patch, (c + 1) * patch))
        mask[sl] = 1
        rgb[sl + (0,)] = 0.95 * checker[sl]
        rgb[sl + (1,)] = 0.15 + 0.1 * checker[sl]
        rgb[sl + (2,)] = 0.9 - 0.8 * checker[sl]
    return np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8), mask


def typicality_pair(
    patches: np.ndarray,
    n_pairs: int = 3,
    seed: int = 0,
    lean: float = 0.02,
    jitter: float = 0.005,
) -> TextTokenPair:
    """Token pair whose normal/abnormal rows share a random base direction and
    differ by +/- ``lean`` times the mean patch token."""
    c = patches.shape[1]
    gen = SplitMix64(seed)
    mean = patches.astype(np.float64).mean(axis=0)
    mean /= np.linalg.norm(mean)
    base = gen.normal(c)
    base -= (base @ mean) * mean
    base /= np.linalg.norm(base)
    rows = []
    for sign in (1.0, -1.0):
        for _ in range(n_pairs):
            row = base + sign * lean * mean + jitter * gen.normal(c)
            rows.append(row / np.linalg.norm(row))
    return average_tokens(np.asarray(rows, dtype=np.float32))


@dataclass(frozen=True)
class CiFixture:
    config: ModelConfig
    store: WeightStore
    rgb: np.ndarray
    mask: np.ndarray
    pair: TextTokenPair
    mode: str


def ci_fixture(weight_seed: int = 0, image_seed: int = 7, pair_seed: int = 1, mode: str = "vv_multi") -> CiFixture:
    """The fixed tiny-model scene used by the TTA behaviour checks."""
    from .image_io import preprocess_array
    from .vision import encode_image

    store = make_synthetic_model(FIXTURE_CONFIG, weight_seed)
    rgb, mask = planted_image(image_seed)
    out = encode_image(preprocess_array(rgb, FIXTURE_CONFIG), store, FIXTURE_CONFIG, mode)
    pair = typicality_pair(out.patches, seed=pair_seed)
    return CiFixture(FIXTURE_CONFIG, store, rgb, mask, pair, mode)
