"""Perception-score layer: differentiable proxy scorers and weighted
multi-task aggregation.

The proxy scorers stand in for frozen downstream perception heads when
no external scorer process is attached.  `contrast_score` rewards
object-vs-surround separation, the patch-oriented signal detection heads
respond to; `exposure_score` rewards broad mid-gray exposure, the
scene-level signal segmentation heads respond to.  Both return analytic
gradients w.r.t. the image so the relighting backward path can turn
them into gradients w.r.t. the light field.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ScorerError
from .images import Image, LUMA_WEIGHTS

SATURATION_KNEE = 0.95


@dataclass(frozen=True)
class Detection:
    """One predicted object: class id, xyxy box, confidence."""

    cls: int
    box: tuple[float, float, float, float]
    conf: float

    def __post_init__(self):
        if not (0.0 <= self.conf <= 1.0):
            raise ValueError(f"confidence {self.conf} outside [0, 1]")
        object.__setattr__(self, "box", tuple(float(c) for c in self.box))


@dataclass(frozen=True)
class ScoreReport:
    """Per-task scores (higher is better) plus optional detector output."""

    scores: dict[str, float]
    total: float
    detections: tuple[Detection, ...] | None = None
    mask_path: str | None = None
    timing_ms: float = 0.0

    def __post_init__(self):
        for task, value in self.scores.items():
            if not math.isfinite(value):
                raise ValueError(f"score for {task!r} is not finite: {value}")


@dataclass(frozen=True)
class ScorerSpec:
    """One entry of a weighted multi-task scoring stack."""

    kind: str
    weight: float = 1.0
    params: dict = field(default_factory=dict)

    KINDS = ("contrast_proxy", "exposure_proxy", "external")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown scorer kind {self.kind!r}")
        if self.weight < 0:
            raise ConfigError(f"scorer weight must be nonnegative, got {self.weight}")


def _channel_grad(image: Image, grad_l: np.ndarray) -> np.ndarray:
    """Expand a gradient w.r.t. luminance to image channels."""
    if image.channels == 1:
        return grad_l[:, :, None].copy()
    return grad_l[:, :, None] * LUMA_WEIGHTS[None, None, :]


def _box_slices(box, height, width, pad=0.0):
    x1, y1, x2, y2 = box
    r0 = max(0, int(np.floor(y1 - pad)))
    r1 = min(height, int(np.ceil(y2 + pad)))
    c0 = max(0, int(np.floor(x1 - pad)))
    c1 = min(width, int(np.ceil(x2 + pad)))
    return slice(r0, r1), slice(c0, c1)


def contrast_score(
    image: Image,
    annotations,
    lambda_sat: float = 1.0,
    ring_frac: float = 0.25,
) -> tuple[float, np.ndarray]:
    """Object-contrast proxy score with analytic gradient.

    Mean over annotated objects of soft-clipped (interior mean luminance
    minus surrounding-ring mean luminance), minus a saturation penalty
    lambda_sat * mean(max(L - 0.95, 0)).  The soft clip c / (1 + |c|)
    keeps any single object from dominating.  Zero-area boxes are
    skipped with a warning.
    """
    l = image.luminance()
    h, w = l.shape
    grad_l = np.zeros_like(l)

    terms = []
    term_grads = []
    for ann in annotations:
        rows, cols = _box_slices(ann.box, h, w)
        if rows.stop <= rows.start or cols.stop <= cols.start:
            warnings.warn(f"skipping zero-area box {ann.box}")
            continue
        x1, y1, x2, y2 = ann.box
        pad = ring_frac * math.hypot(x2 - x1, y2 - y1)
        orows, ocols = _box_slices(ann.box, h, w, pad=max(1.0, pad))
        inner = np.zeros((h, w), dtype=bool)
        inner[rows, cols] = True
        outer = np.zeros((h, w), dtype=bool)
        outer[orows, ocols] = True
        ring = outer & ~inner
        n_in = int(inner.sum())
        n_ring = int(ring.sum())
        if n_ring == 0:
            warnings.warn(f"box {ann.box} has no surrounding ring inside the image")
            continue
        c = float(l[inner].mean() - l[ring].mean())
        terms.append(c / (1.0 + abs(c)))
        dc = 1.0 / (1.0 + abs(c)) ** 2
        g = np.zeros((h, w), dtype=np.float64)
        g[inner] = dc / n_in
        g[ring] = -dc / n_ring
        term_grads.append(g)

    if terms:
        grad_l += np.sum(term_grads, axis=0) / len(terms)
    contrast = float(np.mean(terms)) if terms else 0.0

    over = np.maximum(l - SATURATION_KNEE, 0.0)
    penalty = lambda_sat * float(over.mean())
    grad_l -= lambda_sat * (l > SATURATION_KNEE).astype(np.float64) / (h * w)

    return contrast - penalty, _channel_grad(image, grad_l)


def exposure_score(image: Image, sigma: float = 0.25) -> tuple[float, np.ndarray]:
    """Well-exposedness proxy score with analytic gradient.

    Mean over pixels of exp(-(L - 0.5)^2 / (2 sigma^2)); peaks for
    mid-gray exposure and falls off symmetrically toward black and
    white.
    """
    l = image.luminance()
    kernel = np.exp(-((l - 0.5) ** 2) / (2.0 * sigma * sigma))
    score = float(kernel.mean())
    grad_l = kernel * (-(l - 0.5) / (sigma * sigma)) / l.size
    return score, _channel_grad(image, grad_l)


class ScorerStack:
    """A bound scoring stack: specs plus an optional external client."""

    def __init__(self, specs, external_client=None):
        self.specs = list(specs)
        if not self.specs:
            raise ConfigError("scorer stack is empty")
        self.external_client = external_client

    @property
    def differentiable(self) -> bool:
        return all(s.kind != "external" for s in self.specs)

    def score(self, image: Image, annotations=()) -> tuple[ScoreReport, np.ndarray | None]:
        return aggregate(self.specs, image, annotations, external_client=self.external_client)


def aggregate(
    specs,
    image: Image,
    annotations=(),
    external_client=None,
) -> tuple[ScoreReport, np.ndarray | None]:
    """Weighted sum over a scoring stack.

    Returns the combined report and, when every part is differentiable,
    the weighted-sum gradient w.r.t. the image; any external part makes
    the aggregate opaque (gradient None).
    """
    specs = list(specs)
    if not specs:
        raise ConfigError("scorer stack is empty")

    scores: dict[str, float] = {}
    total = 0.0
    grad = np.zeros_like(image.data, dtype=np.float64)
    differentiable = True
    detections = None
    mask_path = None
    timing = 0.0

    for i, spec in enumerate(specs):
        try:
            if spec.kind == "contrast_proxy":
                value, g = contrast_score(image, annotations, **spec.params)
                grad += spec.weight * g
            elif spec.kind == "exposure_proxy":
                value, g = exposure_score(image, **spec.params)
                grad += spec.weight * g
            else:
                if external_client is None:
                    raise ConfigError("external scorer spec given but no client attached")
                report = external_client.score(image, tasks=spec.params.get("tasks"))
                value = sum(report.scores.values())
                scores.update(report.scores)
                if report.detections is not None and detections is None:
                    detections = report.detections
                if report.mask_path is not None:
                    mask_path = report.mask_path
                timing += report.timing_ms
                differentiable = False
        except ScorerError:
            raise
        except Exception as exc:
            raise ScorerError(f"scorer part {spec.kind!r} (index {i}) failed: {exc}") from exc
        key = spec.kind if spec.kind not in scores else f"{spec.kind}#{i}"
        scores[key] = value
        total += spec.weight * value

    return (
        ScoreReport(scores=scores, total=total, detections=detections,
                    mask_path=mask_path, timing_ms=timing),
        grad if differentiable else None,
    )
