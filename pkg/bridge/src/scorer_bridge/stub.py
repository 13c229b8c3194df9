"""Deterministic stub model for CI and integration tests.

Every enabled task scores the mean image luminance, so any client can
recompute the expected value from the pixels it sent.  Detection
additionally returns bright-blob boxes found with a fixed threshold.
"""

from __future__ import annotations

import numpy as np

LUMA = np.array([0.2126, 0.7152, 0.0722])
BLOB_THRESHOLD = 0.5
MIN_BLOB_AREA = 4


def mean_luminance(rgb: np.ndarray) -> float:
    return float((rgb @ LUMA).mean())


def _connected_components(mask: np.ndarray):
    """4-connected component labelling, plain BFS; small images only."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int64)
    current = 0
    for sr in range(h):
        for sc in range(w):
            if not mask[sr, sc] or labels[sr, sc]:
                continue
            current += 1
            stack = [(sr, sc)]
            labels[sr, sc] = current
            while stack:
                r, c = stack.pop()
                for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] and not labels[rr, cc]:
                        labels[rr, cc] = current
                        stack.append((rr, cc))
    return labels, current


class StubModel:
    """Dependency-light scoring model with fully deterministic output."""

    tasks = ("detection", "segmentation")

    def score_image(self, rgb: np.ndarray, tasks) -> tuple[dict, list | None, None]:
        lum = (rgb @ LUMA).astype(np.float64)
        value = float(lum.mean())
        scores = {t: value for t in tasks}

        detections = None
        if "detection" in tasks:
            detections = []
            labels, count = _connected_components(lum >= BLOB_THRESHOLD)
            for comp in range(1, count + 1):
                region = labels == comp
                if int(region.sum()) < MIN_BLOB_AREA:
                    continue
                rows, cols = np.nonzero(region)
                conf = min(1.0, float(lum[region].mean()))
                detections.append(
                    {
                        "cls": 0,
                        "box": [
                            float(cols.min()),
                            float(rows.min()),
                            float(cols.max() + 1),
                            float(rows.max() + 1),
                        ],
                        "conf": conf,
                    }
                )
            detections.sort(key=lambda d: (-d["conf"], d["box"][1], d["box"][0]))
        return scores, detections, None
