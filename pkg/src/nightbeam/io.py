"""Raster I/O: 8/16-bit PNG and the raw float32 container.

The raw container layout is: magic ``LIDF``, then u32 height, u32 width,
u32 channels (little-endian), then H*W*C float32 samples, row-major,
little-endian.  Light fields use the same container with C=1, warp maps
with C=2.
"""

from __future__ import annotations

import struct
from pathlib import Path

import cv2
import numpy as np

from .errors import ShapeError
from .images import Image, LightField

RAW_MAGIC = b"LIDF"
_HEADER = struct.Struct("<4sIII")


def write_raw(path, data: np.ndarray) -> None:
    """Write a (H, W) or (H, W, C) float array to the raw container."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError(f"raw container expects 2D or 3D data, got shape {arr.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(RAW_MAGIC, h, w, c))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_raw(path) -> np.ndarray:
    """Read a raw container; returns float32 (H, W, C)."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated raw container")
    magic, h, w, c = _HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * h * w * c
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    arr = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(h, w, c)
    return arr.astype(np.float32)


def write_field(path, m: LightField) -> None:
    write_raw(path, m.data)


def read_field(path) -> LightField:
    arr = read_raw(path)
    if arr.shape[2] != 1:
        raise ShapeError(f"{path}: light field container must have C=1, got C={arr.shape[2]}")
    return LightField(np.clip(arr[:, :, 0], 0.0, 1.0))


def write_image_raw(path, image: Image) -> None:
    write_raw(path, image.data)


def read_image_raw(path) -> Image:
    return Image(np.clip(read_raw(path), 0.0, 1.0))


def write_image_png(path, image: Image, bit_depth: int = 16) -> None:
    """Encode to PNG.  16-bit by default to limit quantization loss."""
    if bit_depth == 8:
        q = np.round(image.data * 255.0).astype(np.uint8)
    elif bit_depth == 16:
        q = np.round(image.data * 65535.0).astype(np.uint16)
    else:
        raise ValueError(f"unsupported PNG bit depth {bit_depth}")
    if image.channels == 3:
        q = cv2.cvtColor(q, cv2.COLOR_RGB2BGR)
    else:
        q = q[:, :, 0]
    if not cv2.imwrite(str(path), q):
        raise IOError(f"failed to write PNG {path}")


def read_image_png(path) -> Image:
    """Decode an 8- or 16-bit PNG into a linear [0, 1] image."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"failed to read PNG {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ValueError(f"{path}: unsupported PNG sample type {raw.dtype}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[:, :, :3]
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    data = raw.astype(np.float32) / scale
    return Image(data)


def read_image(path) -> Image:
    """Dispatch on extension: .png or raw container."""
    p = Path(path)
    if p.suffix.lower() == ".png":
        return read_image_png(p)
    return read_image_raw(p)
