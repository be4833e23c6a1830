"""Vision transformer forward pass with value-to-value patch extraction."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .blocks import BlockWeights, qkv_block, value_projection, vv_attention, vv_block
from .tensor_core import l2_normalize_rows, layer_norm
from .weights_io import ConfigError, ModelConfig, WeightStore


class EncodeMode(str, Enum):
    QKV = "qkv"  # patch tokens of the unmodified network
    V_LAST = "v_last"  # values of the last layer
    VV_LAST = "vv_last"  # one V-V attention step on the last layer's values
    VV_MULTI = "vv_multi"  # V-V attention accumulated from vv_start_layer on

    @classmethod
    def parse(cls, value) -> "EncodeMode":
        try:
            return cls(value)
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ConfigError(f"unknown encode mode {value!r} (choose from {choices})") from None


@dataclass(frozen=True)
class VisualOutput:
    v: np.ndarray  # (C,) unit-norm class token
    patches: np.ndarray  # (M, C) unit-norm rows
    grid: tuple[int, int]


def patchify(image: np.ndarray, store: WeightStore, config: ModelConfig) -> np.ndarray:
    """(3, S, S) image -> (M + 1, width) token matrix, class token first.

    Patches are taken row-major over the grid. ``visual.ln_pre`` is applied
    after the positional embeddings, as in CLIP.
    """
    s, p = config.image_size, config.patch_size
    if image.shape != (3, s, s):
        raise ConfigError(f"image has shape {image.shape}, model expects (3, {s}, {s})")
    conv = store["visual.conv1.weight"]
    if conv.shape != (config.vision_width, 3, p, p):
        raise ConfigError(f"visual.conv1.weight has shape {conv.shape}")
    g = s // p
    patches = image.reshape(3, g, p, g, p).transpose(1, 3, 0, 2, 4).reshape(g * g, 3 * p * p)
    embedded = patches @ conv.reshape(config.vision_width, -1).T
    tokens = np.concatenate([store["visual.class_embedding"][None, :], embedded], axis=0)
    tokens = tokens + store["visual.positional_embedding"]
    return layer_norm(tokens, store["visual.ln_pre.weight"], store["visual.ln_pre.bias"], config.ln_eps)


def _project(rows: np.ndarray, store: WeightStore, config: ModelConfig) -> np.ndarray:
    x = layer_norm(rows, store["visual.ln_post.weight"], store["visual.ln_post.bias"], config.ln_eps)
    return l2_normalize_rows(x @ store["visual.proj"])


def encode_image(
    image: np.ndarray, store: WeightStore, config: ModelConfig, mode="vv_multi"
) -> VisualOutput:
    mode = EncodeMode.parse(mode)
    layers = [BlockWeights.from_store(store, f"visual.layer{i}") for i in range(config.vision_layers)]
    heads, eps, act = config.vision_heads, config.ln_eps, config.gelu_variant
    start = config.vv_start_layer
    last = config.vision_layers - 1

    z = patchify(image, store, config)
    values_at: dict[int, np.ndarray] = {}
    vpath = None
    for i, w in enumerate(layers):
        if mode in (EncodeMode.V_LAST, EncodeMode.VV_LAST) and i == last:
            values_at[i] = value_projection(z, w, eps)
        elif mode is EncodeMode.VV_MULTI and i >= start:
            if config.vv_mode == "dual_path" or i == start:
                values = value_projection(z, w, eps)
            if i == start:
                vpath = vv_block(values, w, heads)
            elif config.vv_mode == "dual_path":
                # values of this layer drive the attention; the parallel state
                # carries the residual sum
                vpath = vpath + vv_attention(values, w, heads)
            else:
                vpath = vv_block(vpath, w, heads)
        z = qkv_block(z, w, heads, None, act, eps)

    projected = _project(z, store, config)
    v = projected[0]
    if mode is EncodeMode.QKV:
        patches = projected[1:]
    elif mode is EncodeMode.V_LAST:
        patches = _project(values_at[last][1:], store, config)
    elif mode is EncodeMode.VV_LAST:
        patches = _project(vv_block(values_at[last], layers[last], heads)[1:], store, config)
    else:
        patches = _project(vpath[1:], store, config)
    g = config.grid_size
    return VisualOutput(v=v, patches=patches, grid=(g, g))
