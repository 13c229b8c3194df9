"""Core image and light-field value types and the relighting operators.

Images and fields are stored as float32 in linear intensity, values in
[0, 1].  A light field is a single-channel intensity command that
modulates every color channel of the paired renders identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

# Rec. 709 luma weights, used wherever a scalar luminance is needed.
LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722], dtype=np.float64)


def _validated(data, ndim: int, what: str) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    if ndim == 3 and arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != ndim:
        raise ShapeError(f"{what} must be {ndim}-dimensional, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{what} has empty spatial dimensions: {arr.shape}")
    if ndim == 3 and arr.shape[2] not in (1, 3):
        raise ShapeError(f"{what} must have 1 or 3 channels, got {arr.shape[2]}")
    if not np.all((arr >= 0.0) & (arr <= 1.0)):
        raise ValueError(f"{what} values must lie in [0, 1]")
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Image:
    """A (H, W, C) float32 raster in [0, 1], C in {1, 3}."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _validated(self.data, 3, "image"))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def luminance(self) -> np.ndarray:
        """Scalar luminance per pixel, float64 (H, W)."""
        if self.channels == 1:
            return self.data[:, :, 0].astype(np.float64)
        return self.data.astype(np.float64) @ LUMA_WEIGHTS


@dataclass(frozen=True)
class LightField:
    """A (H, W) float32 per-pixel intensity command in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _validated(self.data, 2, "light field"))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def mean(self) -> float:
        """Mean intensity, accumulated in float64."""
        return float(np.mean(self.data, dtype=np.float64))

    @staticmethod
    def zeros(height: int, width: int) -> "LightField":
        return LightField(np.zeros((height, width), dtype=np.float32))

    @staticmethod
    def full(height: int, width: int, value: float) -> "LightField":
        return LightField(np.full((height, width), value, dtype=np.float32))


@dataclass(frozen=True)
class Annotation:
    """One ground-truth object: class id, xyxy box, optional range and mask."""

    cls: int
    box: tuple[float, float, float, float]
    distance: float | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"degenerate box {self.box}")
        object.__setattr__(self, "box", (float(x1), float(y1), float(x2), float(y2)))
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            m.setflags(write=False)
            object.__setattr__(self, "mask", m)


@dataclass(frozen=True)
class ScenePair:
    """Co-registered renders of one scene: fully lit and unlit.

    `depth` is per-pixel distance in meters; non-positive entries mark
    pixels with no valid depth and are skipped by geometric consumers.
    """

    i_full: Image
    i_off: Image
    depth: np.ndarray | None = None
    annotations: tuple[Annotation, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.i_full.data.shape != self.i_off.data.shape:
            raise ShapeError(
                f"render shapes differ: {self.i_full.data.shape} vs {self.i_off.data.shape}"
            )
        if self.depth is not None:
            d = np.asarray(self.depth, dtype=np.float32)
            if d.shape != (self.height, self.width):
                raise ShapeError(f"depth shape {d.shape} does not match renders")
            d = np.ascontiguousarray(d)
            d.setflags(write=False)
            object.__setattr__(self, "depth", d)
        anns = tuple(self.annotations)
        for a in anns:
            x1, y1, x2, y2 = a.box
            if x1 < 0 or y1 < 0 or x2 > self.width or y2 > self.height:
                raise ValueError(f"annotation box {a.box} outside {self.width}x{self.height} image")
        object.__setattr__(self, "annotations", anns)

    @property
    def height(self) -> int:
        return self.i_full.height

    @property
    def width(self) -> int:
        return self.i_full.width


def _check_field_matches(pair: ScenePair, m: LightField) -> None:
    if (m.height, m.width) != (pair.height, pair.width):
        raise ShapeError(
            f"light field {m.height}x{m.width} does not match scene {pair.height}x{pair.width}"
        )


def relight(pair: ScenePair, m: LightField) -> Image:
    """Blend the lit and unlit renders by the light field.

    Per pixel and channel: out = i_full * m + i_off * (1 - m).  The blend
    is affine in m, so the output is bounded by the two renders.
    """
    _check_field_matches(pair, m)
    mm = m.data[:, :, None]
    out = pair.i_full.data * mm + pair.i_off.data * (1.0 - mm)
    np.clip(out, 0.0, 1.0, out=out)
    return Image(out)


def relight_gradient(pair: ScenePair, upstream: np.ndarray) -> np.ndarray:
    """Backward path of `relight`: fold a per-pixel, per-channel loss
    gradient w.r.t. the relit image into a gradient w.r.t. the field.

    Returns a float64 (H, W) array: sum over channels of
    upstream * (i_full - i_off).
    """
    up = np.asarray(upstream, dtype=np.float64)
    if up.ndim == 2:
        up = up[:, :, None]
    if up.shape != pair.i_full.data.shape:
        raise ShapeError(f"upstream shape {up.shape} does not match scene renders")
    diff = pair.i_full.data.astype(np.float64) - pair.i_off.data.astype(np.float64)
    return np.sum(up * diff, axis=2)


def darken_only(i_lb: Image, m_lb: LightField, m: LightField) -> tuple[Image, LightField]:
    """Attenuation-only relighting for pre-captured footage.

    Light can only be removed from the captured image, never added:
    m_prime = 1 - max(m_lb - m, 0), out = i_lb * m_prime.  No output
    pixel ever exceeds its input pixel.
    """
    if not (i_lb.data.shape[:2] == m_lb.data.shape == m.data.shape):
        raise ShapeError(
            f"darken_only dimension mismatch: image {i_lb.data.shape[:2]}, "
            f"m_lb {m_lb.data.shape}, m {m.data.shape}"
        )
    m_prime = 1.0 - np.maximum(m_lb.data - m.data, 0.0)
    out = i_lb.data * m_prime[:, :, None]
    return Image(out), LightField(m_prime)
