"""Image export/import: 8-bit PNG and a lossless float32 dump.

The float dump is little-endian: magic ``FIMG``, three uint32 (height,
width, channels), then row-major float32 samples.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidParameterError, ParseError

_FLOAT_MAGIC = b"FIMG"


def _check_image(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise InvalidParameterError(f"image must be (H, W) or (H, W, C), got shape {np.asarray(image).shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameterError("image must be finite")
    return arr


def save_png(image, path) -> None:
    """Write an image with values in [0, 1] as 8-bit PNG (values are clipped)."""
    arr = _check_image(image)
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if u8.shape[2] == 1:
        u8 = u8[:, :, 0]
    elif u8.shape[2] != 3:
        raise InvalidParameterError("PNG export supports 1 or 3 channels")
    Image.fromarray(u8).save(Path(path), format="PNG")


def load_png(path) -> np.ndarray:
    """Read a PNG back to float64 in [0, 1], shape (H, W, C)."""
    with Image.open(Path(path)) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float64) / 255.0


def save_float_image(image, path) -> None:
    """Lossless float32 dump with an (H, W, C) header."""
    arr = _check_image(image).astype("<f4")
    h, w, c = arr.shape
    with open(Path(path), "wb") as fh:
        fh.write(_FLOAT_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(arr).tobytes())


def load_float_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != _FLOAT_MAGIC:
        raise ParseError("not a float image dump (bad magic)")
    h, w, c = struct.unpack("<III", data[4:16])
    expected = 16 + 4 * h * w * c
    if len(data) != expected:
        raise ParseError(f"float image dump has {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, c).astype(np.float64)
