"""Transformer building blocks shared by the text and vision towers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import ShapeError, gelu, layer_norm, linear, softmax_rows
from .weights_io import ConfigError


@dataclass(frozen=True)
class BlockWeights:
    ln_1_weight: np.ndarray
    ln_1_bias: np.ndarray
    qkv_weight: np.ndarray
    qkv_bias: np.ndarray
    out_weight: np.ndarray
    out_bias: np.ndarray
    ln_2_weight: np.ndarray
    ln_2_bias: np.ndarray
    fc_weight: np.ndarray
    fc_bias: np.ndarray
    proj_weight: np.ndarray
    proj_bias: np.ndarray

    @classmethod
    def from_store(cls, store, prefix: str) -> "BlockWeights":
        return cls(
            ln_1_weight=store[f"{prefix}.ln_1.weight"],
            ln_1_bias=store[f"{prefix}.ln_1.bias"],
            qkv_weight=store[f"{prefix}.attn.qkv_weight"],
            qkv_bias=store[f"{prefix}.attn.qkv_bias"],
            out_weight=store[f"{prefix}.attn.out_weight"],
            out_bias=store[f"{prefix}.attn.out_bias"],
            ln_2_weight=store[f"{prefix}.ln_2.weight"],
            ln_2_bias=store[f"{prefix}.ln_2.bias"],
            fc_weight=store[f"{prefix}.mlp.fc_weight"],
            fc_bias=store[f"{prefix}.mlp.fc_bias"],
            proj_weight=store[f"{prefix}.mlp.proj_weight"],
            proj_bias=store[f"{prefix}.mlp.proj_bias"],
        )

    @property
    def width(self) -> int:
        return self.out_weight.shape[0]


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, width = x.shape
    if width % heads:
        raise ConfigError(f"width {width} not divisible by {heads} heads")
    return x.reshape(n, heads, width // heads).transpose(1, 0, 2)


def multi_head_attention(q, k, v, heads: int, mask=None) -> np.ndarray:
    """Scaled dot-product attention over ``heads`` heads; rows are tokens.

    ``mask`` is an additive (n_q, n_k) array (``-inf`` blocks a key).
    """
    if q.shape[1] != k.shape[1] or k.shape != v.shape:
        raise ShapeError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    scale = np.asarray(1.0 / math.sqrt(qh.shape[-1]), dtype=q.dtype)
    logits = (qh * scale) @ kh.transpose(0, 2, 1)
    if mask is not None:
        logits = logits + mask
    weights = softmax_rows(logits)
    out = weights @ vh
    return out.transpose(1, 0, 2).reshape(q.shape[0], -1)


def qkv_split(z: np.ndarray, w: BlockWeights, eps: float):
    h = layer_norm(z, w.ln_1_weight, w.ln_1_bias, eps)
    qkv = linear(h, w.qkv_weight, w.qkv_bias)
    width = w.width
    return qkv[:, :width], qkv[:, width : 2 * width], qkv[:, 2 * width :]


def value_projection(z: np.ndarray, w: BlockWeights, eps: float) -> np.ndarray:
    """Values of one layer: the V third of ``QKVProj(LN(z))``."""
    h = layer_norm(z, w.ln_1_weight, w.ln_1_bias, eps)
    width = w.width
    return linear(h, w.qkv_weight[2 * width :], w.qkv_bias[2 * width :])


def qkv_block(
    z: np.ndarray,
    w: BlockWeights,
    heads: int,
    mask=None,
    gelu_variant: str = "erf",
    eps: float = 1e-5,
) -> np.ndarray:
    """Pre-norm attention block: attention residual, then MLP residual."""
    if z.ndim != 2 or z.shape[1] != w.width:
        raise ShapeError(f"block input {z.shape} does not match width {w.width}")
    q, k, v = qkv_split(z, w, eps)
    z = z + linear(multi_head_attention(q, k, v, heads, mask), w.out_weight, w.out_bias)
    hidden = gelu(
        linear(layer_norm(z, w.ln_2_weight, w.ln_2_bias, eps), w.fc_weight, w.fc_bias),
        gelu_variant,
    )
    return z + linear(hidden, w.proj_weight, w.proj_bias)


def vv_attention(v_state: np.ndarray, w: BlockWeights, heads: int) -> np.ndarray:
    """``Proj(Attention(V, V, V))``: ``v_state`` is query, key and value at once."""
    if v_state.ndim != 2 or v_state.shape[1] != w.width:
        raise ShapeError(f"block input {v_state.shape} does not match width {w.width}")
    attn = multi_head_attention(v_state, v_state, v_state, heads)
    return linear(attn, w.out_weight, w.out_bias)


def vv_block(v_state: np.ndarray, w: BlockWeights, heads: int) -> np.ndarray:
    """Value-to-value attention plus residual; no MLP sublayer."""
    return v_state + vv_attention(v_state, w, heads)
