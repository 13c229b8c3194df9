"""Proxy perception heads for the toy corpus.

A center-surround blob detector and a chromaticity segmenter.  Both are
deliberately simple and fixed across illumination methods: their only
job is to reward lighting that makes objects stand out, the same way a
frozen downstream network would, while staying fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .images import Image
from .metrics import iou_matrix
from .scoring import Detection
from .toygen import CLASS_ALBEDO, ROAD_ALBEDO


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


CLASS_CHROMA = _unit_rows(CLASS_ALBEDO)
BACKGROUND_CHROMA = _unit_rows(np.array([ROAD_ALBEDO]))[0]


@dataclass(frozen=True)
class DetectorParams:
    center_size: int = 3
    surround_size: int = 21
    response_threshold: float = 0.02
    min_area: int = 8
    min_side: float = 2.0
    max_width_frac: float = 0.5
    max_aspect: float = 4.0
    conf_scale: float = 0.05
    min_luminance: float = 0.015
    nms_iou: float = 0.6


def _classify_chroma(rgb: np.ndarray) -> int:
    norm = np.linalg.norm(rgb)
    if norm <= 1e-9:
        return 0
    sims = CLASS_CHROMA @ (rgb / norm)
    return int(np.argmax(sims))


def detect(image: Image, params: DetectorParams | None = None) -> list[Detection]:
    """Center-surround blob detection with chroma classification."""
    params = params or DetectorParams()
    l = image.luminance()
    resp = ndimage.uniform_filter(l, params.center_size, mode="nearest") - ndimage.uniform_filter(
        l, params.surround_size, mode="nearest"
    )
    mask = resp > params.response_threshold
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if image.channels == 3:
        rgb = image.data.astype(np.float64)
    else:
        rgb = np.repeat(image.data.astype(np.float64), 3, axis=2)

    h, w = l.shape
    raw: list[Detection] = []
    for comp in range(1, n + 1):
        region = labels == comp
        area = int(region.sum())
        if area < params.min_area:
            continue
        rows, cols = np.nonzero(region)
        y1, y2 = float(rows.min()), float(rows.max() + 1)
        x1, x2 = float(cols.min()), float(cols.max() + 1)
        bw, bh = x2 - x1, y2 - y1
        if bw < params.min_side or bh < params.min_side or bw > params.max_width_frac * w:
            continue
        if bw / bh > params.max_aspect:  # horizontal glare bands, not objects
            continue
        if float(l[region].mean()) < params.min_luminance:
            continue
        r_mean = float(resp[region].mean())
        conf = r_mean / (r_mean + params.conf_scale)
        cls = _classify_chroma(rgb[region].mean(axis=0))
        raw.append(Detection(cls=cls, box=(x1, y1, x2, y2), conf=min(max(conf, 0.0), 1.0)))

    # per-class NMS, highest confidence first, stable order
    kept: list[Detection] = []
    for cls in sorted({d.cls for d in raw}):
        group = sorted(
            (d for d in raw if d.cls == cls), key=lambda d: (-d.conf, d.box[1], d.box[0])
        )
        boxes: list[Detection] = []
        for d in group:
            if boxes:
                ious = iou_matrix(
                    np.array([d.box], dtype=np.float64),
                    np.array([k.box for k in boxes], dtype=np.float64),
                )[0]
                if ious.max() >= params.nms_iou:
                    continue
            boxes.append(d)
        kept.extend(boxes)
    return kept


@dataclass(frozen=True)
class SegmenterParams:
    min_luminance: float = 0.02


def segment(image: Image, params: SegmenterParams | None = None) -> np.ndarray:
    """Per-pixel chromaticity labelling: 0 background, k+1 for class k.

    Pixels too dark to carry usable color fall back to background, so
    label quality tracks how well the scene is lit.
    """
    params = params or SegmenterParams()
    if image.channels == 3:
        rgb = image.data.astype(np.float64)
    else:
        rgb = np.repeat(image.data.astype(np.float64), 3, axis=2)
    l = image.luminance()
    norms = np.linalg.norm(rgb, axis=2)
    safe = np.maximum(norms, 1e-9)
    unit = rgb / safe[:, :, None]

    prototypes = np.vstack([BACKGROUND_CHROMA, CLASS_CHROMA])
    sims = unit @ prototypes.T
    labels = np.argmax(sims, axis=2).astype(np.uint8)
    labels[l < params.min_luminance] = 0
    return labels
