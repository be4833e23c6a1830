"""Model configuration, tensor archives and synthetic weights.

Archive layout (all integers little-endian)::

    bytes 0..8    magic b"ZSALTNS1"
    bytes 8..16   u64 header length H
    bytes 16..16+H  UTF-8 JSON header
    remaining     raw float32 blobs

The header maps each tensor name to ``{"dtype": "f32", "shape": [...],
"data_offset": o, "data_length": n}`` with offsets relative to the first blob
byte, plus a ``"__metadata__"`` object of string values. Names are written in
sorted order and the header is dumped with sorted keys and no whitespace, so
equal stores give byte-identical files.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import SplitMix64, fnv1a64

MAGIC = b"ZSALTNS1"
FORMAT_VERSION = "1"
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class ConfigError(ValueError):
    pass


class ArchiveError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MagicError(ArchiveError):
    pass


class TruncatedError(ArchiveError):
    pass


class SizeMismatchError(ArchiveError):
    pass


class NonFiniteTensorError(ArchiveError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    # defaults follow the ViT-B-16+ CLIP at 240px
    image_size: int = 240
    patch_size: int = 16
    vision_width: int = 896
    vision_layers: int = 12
    vision_heads: int = 14
    embed_dim: int = 640
    text_width: int = 640
    text_layers: int = 12
    text_heads: int = 10
    context_length: int = 77
    vocab_size: int = 49408
    vv_start_layer: int | None = None
    vv_mode: str = "dual_path"
    temperature: float = 100.0
    gelu_variant: str = "erf"
    mlp_ratio: float = 4.0
    ln_eps: float = 1e-5
    image_mean: tuple[float, float, float] = CLIP_MEAN
    image_std: tuple[float, float, float] = CLIP_STD

    def __post_init__(self):
        if self.vv_start_layer is None:
            object.__setattr__(self, "vv_start_layer", self.vision_layers // 2)
        object.__setattr__(self, "image_mean", tuple(float(v) for v in self.image_mean))
        object.__setattr__(self, "image_std", tuple(float(v) for v in self.image_std))
        self.validate()

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if not 0 <= self.vv_start_layer < self.vision_layers:
            raise ConfigError(
                f"vv_start_layer {self.vv_start_layer} outside [0, {self.vision_layers})"
            )
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.vv_mode not in ("dual_path", "chained"):
            raise ConfigError(f"unknown vv_mode {self.vv_mode!r}")
        if self.vision_width % self.vision_heads or self.text_width % self.text_heads:
            raise ConfigError("width not divisible by head count")
        if len(self.image_mean) != 3 or len(self.image_std) != 3:
            raise ConfigError("image_mean and image_std need 3 channels")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def vision_mlp_width(self) -> int:
        return int(round(self.vision_width * self.mlp_ratio))

    @property
    def text_mlp_width(self) -> int:
        return int(round(self.text_width * self.mlp_ratio))

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Two-layer toy architecture used by the CI fixtures."""
        base = dict(
            image_size=32,
            patch_size=16,
            vision_width=16,
            vision_layers=2,
            vision_heads=2,
            embed_dim=8,
            text_width=16,
            text_layers=2,
            text_heads=2,
            context_length=32,
            vocab_size=642,  # size of the shipped toy tokenizer
            image_mean=(0.0, 0.0, 0.0),
            image_std=(1.0, 1.0, 1.0),
        )
        base.update(overrides)
        return cls(**base)


def _block_shapes(prefix: str, width: int, mlp: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.ln_1.weight": (width,),
        f"{prefix}.ln_1.bias": (width,),
        f"{prefix}.attn.qkv_weight": (3 * width, width),
        f"{prefix}.attn.qkv_bias": (3 * width,),
        f"{prefix}.attn.out_weight": (width, width),
        f"{prefix}.attn.out_bias": (width,),
        f"{prefix}.ln_2.weight": (width,),
        f"{prefix}.ln_2.bias": (width,),
        f"{prefix}.mlp.fc_weight": (mlp, width),
        f"{prefix}.mlp.fc_bias": (mlp,),
        f"{prefix}.mlp.proj_weight": (width, mlp),
        f"{prefix}.mlp.proj_bias": (width,),
    }


def required_tensors(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape manifest of every tensor a model archive must carry.

    Linear weights are stored (out, in); ``visual.proj`` and
    ``text.projection`` are (in, out) as in CLIP checkpoints.
    """
    w, p = config.vision_width, config.patch_size
    shapes: dict[str, tuple[int, ...]] = {
        "visual.conv1.weight": (w, 3, p, p),
        "visual.class_embedding": (w,),
        "visual.positional_embedding": (config.num_patches + 1, w),
        "visual.ln_pre.weight": (w,),
        "visual.ln_pre.bias": (w,),
        "visual.ln_post.weight": (w,),
        "visual.ln_post.bias": (w,),
        "visual.proj": (w, config.embed_dim),
    }
    for i in range(config.vision_layers):
        shapes.update(_block_shapes(f"visual.layer{i}", w, config.vision_mlp_width))
    tw = config.text_width
    shapes.update(
        {
            "text.token_embedding": (config.vocab_size, tw),
            "text.positional_embedding": (config.context_length, tw),
            "text.ln_final.weight": (tw,),
            "text.ln_final.bias": (tw,),
            "text.projection": (tw, config.embed_dim),
        }
    )
    for i in range(config.text_layers):
        shapes.update(_block_shapes(f"text.layer{i}", tw, config.text_mlp_width))
    return shapes


@dataclass(frozen=True)
class WeightStore:
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        frozen = {}
        for name, arr in self.entries.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "entries", frozen)
        meta = {str(k): str(v) for k, v in self.metadata.items()}
        meta.setdefault("format_version", FORMAT_VERSION)
        object.__setattr__(self, "metadata", meta)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.entries[name]
        except KeyError:
            raise KeyError(f"weight store has no tensor {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def bitwise_equal(self, other: "WeightStore") -> bool:
        if self.metadata != other.metadata or self.entries.keys() != other.entries.keys():
            return False
        return all(
            a.shape == other.entries[k].shape and a.tobytes() == other.entries[k].tobytes()
            for k, a in self.entries.items()
        )

    def config(self) -> ModelConfig:
        if "config" not in self.metadata:
            raise ConfigError("archive metadata carries no model config")
        return ModelConfig.from_json(self.metadata["config"])

    def validate_for(self, config: ModelConfig) -> None:
        for name, shape in required_tensors(config).items():
            if name not in self.entries:
                raise ConfigError(f"missing tensor {name!r}")
            if self.entries[name].shape != shape:
                raise ConfigError(
                    f"tensor {name!r} has shape {self.entries[name].shape}, expected {shape}"
                )


def _encode(store: WeightStore) -> bytes:
    header: dict[str, object] = {"__metadata__": dict(sorted(store.metadata.items()))}
    blobs = []
    offset = 0
    for name in sorted(store.entries):
        arr = store.entries[name]
        if not np.all(np.isfinite(arr)):
            raise NonFiniteTensorError(f"tensor {name!r} has non-finite values", offset)
        blob = arr.astype("<f4").tobytes()
        header[name] = {
            "dtype": "f32",
            "shape": list(arr.shape),
            "data_offset": offset,
            "data_length": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    head_bytes = head.encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head_bytes)) + head_bytes + b"".join(blobs)


def save_archive(store: WeightStore, path) -> None:
    data = _encode(store)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def decode_archive(data: bytes) -> WeightStore:
    if len(data) < 16:
        raise TruncatedError("file shorter than the 16-byte preamble", len(data))
    if data[:8] != MAGIC:
        raise MagicError(f"bad magic {data[:8]!r}", 0)
    (head_len,) = struct.unpack("<Q", data[8:16])
    if 16 + head_len > len(data):
        raise TruncatedError(f"header of {head_len} bytes runs past end of file", 16)
    try:
        header = json.loads(data[16 : 16 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"malformed header: {exc}", 16) from None
    base = 16 + head_len
    metadata = header.pop("__metadata__", {})
    if "format_version" not in metadata:
        raise ArchiveError("metadata lacks format_version", 16)
    entries = {}
    for name, info in header.items():
        shape = tuple(int(s) for s in info["shape"])
        start = base + int(info["data_offset"])
        length = int(info["data_length"])
        if info.get("dtype") != "f32":
            raise ArchiveError(f"tensor {name!r}: unsupported dtype {info.get('dtype')!r}", start)
        if length != 4 * math.prod(shape):
            raise SizeMismatchError(
                f"tensor {name!r}: shape {list(shape)} needs {4 * math.prod(shape)} bytes, "
                f"header says {length}",
                start,
            )
        if start + length > len(data):
            raise TruncatedError(f"tensor {name!r} runs past end of file", start)
        arr = np.frombuffer(data, dtype="<f4", count=length // 4, offset=start).reshape(shape)
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr.reshape(-1)))[0])
            raise NonFiniteTensorError(f"tensor {name!r} has a non-finite value", start + 4 * bad)
        entries[name] = arr.astype(np.float32)
    return WeightStore(entries, metadata)


def load_archive(path, config: ModelConfig | None = None) -> WeightStore:
    """Read an archive; validate it against ``config`` (or its embedded config)."""
    store = decode_archive(Path(path).read_bytes())
    if config is None and "config" in store.metadata:
        config = store.config()
    if config is not None:
        store.validate_for(config)
    return store


def _init_tensor(name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if name.endswith((".ln_1.weight", ".ln_2.weight", "ln_pre.weight", "ln_post.weight", "ln_final.weight")):
        return np.ones(shape, dtype=np.float32)
    if leaf in ("bias", "qkv_bias", "out_bias", "fc_bias", "proj_bias"):
        return np.zeros(shape, dtype=np.float32)
    if name in ("visual.proj", "text.projection"):
        fan_in = shape[0]
    elif len(shape) == 1:
        fan_in = shape[0]
    else:
        fan_in = math.prod(shape[1:])
    gen = SplitMix64(seed ^ fnv1a64(name))
    values = gen.normal(math.prod(shape)) / math.sqrt(fan_in)
    return values.reshape(shape).astype(np.float32)


def make_synthetic_model(config: ModelConfig, seed: int) -> WeightStore:
    """Random model with every manifest tensor.

    Layer-norm gains are 1 and all biases 0. Every other tensor is drawn from a
    :class:`SplitMix64` stream seeded with ``seed ^ fnv1a64(name)``, standard
    normal scaled by ``1/sqrt(fan_in)`` (fan_in: product of all axes but the
    first, or the first axis for ``visual.proj``/``text.projection`` and
    vectors).
    """
    entries = {
        name: _init_tensor(name, shape, seed)
        for name, shape in sorted(required_tensors(config).items())
    }
    meta = {"config": config.to_json(), "kind": "model", "synthetic_seed": str(seed)}
    return WeightStore(entries, meta)
