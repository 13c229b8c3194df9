from __future__ import annotations

import numpy as np
import pytest

from nightbeam.images import Annotation, Image, LightField, ScenePair


def random_pair(rng, h=16, w=16, channels=3, annotations=()):
    i_full = Image(rng.random((h, w, channels)).astype(np.float32))
    i_off = Image((rng.random((h, w, channels)) * 0.3).astype(np.float32))
    return ScenePair(i_full=i_full, i_off=i_off, annotations=tuple(annotations))


def uniform_pair(h, w, full_value, off_value, channels=3, annotations=(), depth=None):
    i_full = Image(np.full((h, w, channels), full_value, dtype=np.float32))
    i_off = Image(np.full((h, w, channels), off_value, dtype=np.float32))
    return ScenePair(i_full=i_full, i_off=i_off, depth=depth, annotations=tuple(annotations))


def boxed_pair(h=32, w=32, box=(10.0, 10.0, 20.0, 20.0), cls=0):
    """Scene whose lit render shows a bright box on a dark background."""
    full = np.full((h, w, 3), 0.25, dtype=np.float32)
    x1, y1, x2, y2 = (int(v) for v in box)
    full[y1:y2, x1:x2] = 0.9
    off = np.full((h, w, 3), 0.02, dtype=np.float32)
    ann = Annotation(cls=cls, box=box)
    return ScenePair(i_full=Image(full), i_off=Image(off), annotations=(ann,))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def finite_difference_field_grad(fn, m: LightField, h=1e-3):
    """Central differences of a scalar function of a light field."""
    base = m.data.astype(np.float64)
    g = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = base.copy()
        plus[idx] = np.clip(plus[idx] + h, 0.0, 1.0)
        minus = base.copy()
        minus[idx] = np.clip(minus[idx] - h, 0.0, 1.0)
        step = plus[idx] - minus[idx]
        g[idx] = (fn(LightField(plus.astype(np.float32))) - fn(LightField(minus.astype(np.float32)))) / step
    return g


def finite_difference_image_grad(fn, img: Image, h=1e-3):
    """Central differences of a scalar function of an image."""
    base = img.data.astype(np.float64)
    g = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = base.copy()
        plus[idx] = np.clip(plus[idx] + h, 0.0, 1.0)
        minus = base.copy()
        minus[idx] = np.clip(minus[idx] - h, 0.0, 1.0)
        step = plus[idx] - minus[idx]
        g[idx] = (fn(Image(plus.astype(np.float32))) - fn(Image(minus.astype(np.float32)))) / step
    return g
