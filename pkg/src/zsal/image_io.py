"""Image loading, bicubic resizing and anomaly-map output files."""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .weights_io import ModelConfig

CUBIC_A = -0.5


class ImageInputError(ValueError):
    pass


def cubic_kernel(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    x = np.abs(x)
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation matrix for 1-D Catmull-Rom resampling.

    Pixel centers are aligned (half-pixel convention), taps outside the input
    are clamped to the border, and each row sums to one. No antialiasing.
    """
    scale = n_in / n_out
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(centers).astype(np.int64)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    for tap in range(-1, 3):
        idx = base + tap
        w = cubic_kernel(centers - idx)
        np.add.at(mat, (rows, np.clip(idx, 0, n_in - 1)), w)
    return mat / mat.sum(axis=1, keepdims=True)


def resize_bicubic(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize a (C, H, W) float image separably."""
    c, h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()
    rh = resize_matrix(h, height)
    rw = resize_matrix(w, width)
    out = np.einsum("yh,chw,xw->cyx", rh, img.astype(np.float64), rw)
    return out.astype(img.dtype)


def read_rgb(path) -> np.ndarray:
    """Decode a PNG/PPM file to a (H, W, 3) uint8 array."""
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise ImageInputError(f"{path}: unsupported format {im.format}")
            if im.mode not in ("RGB", "RGBA", "L", "P", "LA"):
                raise ImageInputError(f"{path}: unsupported mode {im.mode}")
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageInputError(f"{path}: cannot decode image ({exc})") from None


def read_mask(path) -> np.ndarray:
    """Binary mask from an image file (any nonzero pixel is foreground)."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageInputError(f"{path}: cannot decode mask ({exc})") from None
    return (arr > 0).astype(np.uint8)


def preprocess_array(rgb: np.ndarray, config: ModelConfig) -> np.ndarray:
    """(H, W, 3) uint8 -> normalized (3, S, S) float32 model input."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ImageInputError(f"expected an (H, W, 3) image, got shape {rgb.shape}")
    chw = np.transpose(rgb, (2, 0, 1)).astype(np.float32)
    size = config.image_size
    resized = resize_bicubic(chw, size, size)
    scaled = resized / np.float32(255.0)
    mean = np.asarray(config.image_mean, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(config.image_std, dtype=np.float32).reshape(3, 1, 1)
    return ((scaled - mean) / std).astype(np.float32)


def preprocess(path, config: ModelConfig) -> tuple[np.ndarray, tuple[int, int]]:
    """Load and preprocess an image; also returns its original (H, W)."""
    rgb = read_rgb(path)
    return preprocess_array(rgb, config), rgb.shape[:2]


def _check_range(scores: np.ndarray) -> None:
    if not np.all(np.isfinite(scores)) or scores.min() < 0.0 or scores.max() > 1.0:
        raise ValueError("anomaly map values must lie in [0, 1]")


def write_pgm16(scores: np.ndarray, path) -> None:
    """Binary 16-bit PGM (big-endian samples) of round(score * 65535)."""
    scores = np.asarray(scores)
    _check_range(scores)
    h, w = scores.shape
    levels = np.rint(scores.astype(np.float64) * 65535.0).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(levels.tobytes())


def read_pgm16(path) -> np.ndarray:
    data = Path(path).read_bytes()
    # exactly one whitespace byte separates maxval from the samples
    head = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if head is None or int(head.group(3)) != 65535:
        raise ImageInputError(f"{path}: not a 16-bit binary PGM")
    w, h = int(head.group(1)), int(head.group(2))
    if len(data) - head.end() != 2 * w * h:
        raise ImageInputError(f"{path}: PGM payload does not match its {w}x{h} header")
    return np.frombuffer(data, dtype=">u2", offset=head.end()).reshape(h, w).astype(np.uint16)


def write_raw_map(scores: np.ndarray, path) -> None:
    """u32 height, u32 width, then row-major little-endian float32 values."""
    scores = np.asarray(scores, dtype=np.float32)
    _check_range(scores)
    h, w = scores.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<II", h, w))
        f.write(scores.astype("<f4").tobytes())


def read_raw_map(path) -> np.ndarray:
    data = Path(path).read_bytes()
    h, w = struct.unpack("<II", data[:8])
    if len(data) != 8 + 4 * h * w:
        raise ImageInputError(f"{path}: raw map size does not match its {h}x{w} header")
    return np.frombuffer(data, dtype="<f4", offset=8).reshape(h, w).astype(np.float32)


def render_map(anomaly_map, path, raw_path=None) -> None:
    scores = getattr(anomaly_map, "scores", anomaly_map)
    write_pgm16(scores, path)
    if raw_path is not None:
        write_raw_map(scores, raw_path)
