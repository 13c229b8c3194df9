"""Detection and segmentation metrics.

Detection follows the COCO-style protocol: per-class greedy matching in
descending confidence order at each IoU threshold, average precision by
101-point interpolated precision envelope, and the 50-90 summary
averaging thresholds 0.5 to 0.9 in steps of 0.05.  Precision and recall
are micro-averaged over all classes at IoU 0.5 using every supplied
prediction.  Duplicate matches beyond the first count as false
positives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .images import LightField
from .scoring import Detection

IOU_50_90 = tuple(round(0.5 + 0.05 * i, 2) for i in range(9))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two (N, 4) / (M, 4) xyxy box arrays."""
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def _sort_by_confidence(preds: list[Detection]) -> list[int]:
    """Stable ordering: descending confidence, input order breaks ties."""
    return sorted(range(len(preds)), key=lambda i: (-preds[i].conf, i))


def match_greedy(
    preds: list[Detection], gt_boxes: np.ndarray, thr: float
) -> tuple[list[int], list[int]]:
    """Greedy confidence-descending matching against one class's boxes.

    Returns (order, matched) where `order` indexes preds in match order
    and matched[k] is the index of the unclaimed box preds[order[k]]
    claimed (highest IoU >= thr, lowest index on ties), or -1.
    """
    order = _sort_by_confidence(preds)
    if len(preds) == 0:
        return order, []
    pred_boxes = np.array([preds[i].box for i in order], dtype=np.float64).reshape(len(order), 4)
    gt_boxes = gt_boxes.reshape(-1, 4) if gt_boxes.size else gt_boxes.reshape(0, 4)
    ious = iou_matrix(pred_boxes, gt_boxes)
    taken = np.zeros(gt_boxes.shape[0], dtype=bool)
    matched = []
    for k in range(len(order)):
        best_j, best_v = -1, 0.0
        for j in range(gt_boxes.shape[0]):
            if taken[j]:
                continue
            v = ious[k, j]
            if v >= thr and (best_j == -1 or v > best_v):
                best_j, best_v = j, v
        if best_j >= 0:
            taken[best_j] = True
        matched.append(best_j)
    return order, matched


def average_precision_101(tp_flags: np.ndarray, n_gt: int) -> float:
    """AP over the 101-point interpolated precision envelope.

    `tp_flags` must already be ordered by descending confidence across
    the whole evaluation pool.
    """
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if tp_flags.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp_flags)
    fp_cum = np.cumsum(~tp_flags)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # envelope: best precision at any recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, points, side="left")
    vals = np.where(idx < recall.size, env[np.minimum(idx, recall.size - 1)], 0.0)
    return float(vals.mean())


@dataclass(frozen=True)
class DetectionMetrics:
    precision: float
    recall: float
    map50: float
    map50_90: float
    ap_by_threshold: dict[float, float]
    tp: int
    fp: int
    fn: int
    n_gt: int
    n_pred: int


def _match_all(preds_by_scene, gts_by_scene, thr):
    """Match every scene per class; yields pooled (conf, scene, rank, tp)
    rows per class plus per-scene matched-gt bookkeeping."""
    classes = sorted({g.cls for gts in gts_by_scene for g in gts})
    rows_by_class: dict[int, list[tuple[float, int, int, bool]]] = {c: [] for c in classes}
    n_gt_by_class = {c: 0 for c in classes}
    matches = []  # per scene: list of (pred_index, gt_index or -1) over all classes
    for s, (preds, gts) in enumerate(zip(preds_by_scene, gts_by_scene)):
        scene_match = {}
        for c in sorted({p.cls for p in preds} | {g.cls for g in gts}):
            p_idx = [i for i, p in enumerate(preds) if p.cls == c]
            g_idx = [j for j, g in enumerate(gts) if g.cls == c]
            g_boxes = np.array([gts[j].box for j in g_idx], dtype=np.float64).reshape(len(g_idx), 4)
            order, matched = match_greedy([preds[i] for i in p_idx], g_boxes, thr)
            for k, j in zip(order, matched):
                gt_hit = g_idx[j] if j >= 0 else -1
                scene_match[p_idx[k]] = gt_hit
                if c in rows_by_class:
                    rows_by_class[c].append((preds[p_idx[k]].conf, s, p_idx[k], gt_hit >= 0))
            if c in n_gt_by_class:
                n_gt_by_class[c] += len(g_idx)
        matches.append(scene_match)
    return classes, rows_by_class, n_gt_by_class, matches


def detection_metrics(preds_by_scene, gts_by_scene, iou_thresholds=IOU_50_90) -> DetectionMetrics:
    """Evaluate pooled detections against ground truth.

    `preds_by_scene` and `gts_by_scene` are parallel lists over scenes.
    Classes that never occur in the ground truth are excluded from mAP;
    their predictions still count against micro precision.
    """
    if len(preds_by_scene) != len(gts_by_scene):
        raise ConfigError("prediction and ground-truth scene lists differ in length")
    ap_by_threshold: dict[float, float] = {}
    for thr in iou_thresholds:
        classes, rows_by_class, n_gt_by_class, _ = _match_all(preds_by_scene, gts_by_scene, thr)
        aps = []
        for c in classes:
            if n_gt_by_class[c] == 0:
                continue
            rows = sorted(rows_by_class[c], key=lambda r: (-r[0], r[1], r[2]))
            flags = np.array([r[3] for r in rows], dtype=bool)
            aps.append(average_precision_101(flags, n_gt_by_class[c]))
        ap_by_threshold[thr] = float(np.mean(aps)) if aps else 0.0

    # micro precision/recall and counts at the 0.5 threshold
    _, _, _, matches = _match_all(preds_by_scene, gts_by_scene, 0.5)
    tp = sum(1 for m in matches for g in m.values() if g >= 0)
    n_pred = sum(len(p) for p in preds_by_scene)
    n_gt = sum(len(g) for g in gts_by_scene)
    fp = n_pred - tp
    fn = n_gt - tp
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gt if n_gt else 0.0

    map50 = ap_by_threshold.get(0.5, 0.0)
    in_range = [ap_by_threshold[t] for t in IOU_50_90 if t in ap_by_threshold]
    map50_90 = float(np.mean(in_range)) if in_range else 0.0
    return DetectionMetrics(
        precision=precision,
        recall=recall,
        map50=map50,
        map50_90=map50_90,
        ap_by_threshold=ap_by_threshold,
        tp=tp,
        fp=fp,
        fn=fn,
        n_gt=n_gt,
        n_pred=n_pred,
    )


@dataclass(frozen=True)
class BandMetrics:
    lo: float
    hi: float
    map50: float | None
    tp: int
    fp: int
    fn: int
    n_gt: int
    n_pred: int


def distance_banded(preds_by_scene, gts_by_scene, bands=(0.0, 20.0, 60.0, 70.0)) -> list[BandMetrics]:
    """Per-distance-band detection quality.

    Ground truth is partitioned by object distance into bands delimited
    by `bands` edges (the final band is open-ended).  A matched
    prediction lands in its ground truth's band; an unmatched one in the
    band of its highest-IoU ground truth, or the last band when it
    overlaps nothing.  Bands with no ground truth report mAP as absent.
    """
    edges = [float(b) for b in bands]
    if any(e2 <= e1 for e1, e2 in zip(edges, edges[1:])):
        raise ConfigError(f"band edges must be strictly increasing, got {edges}")
    limits = edges + [float("inf")]
    n_bands = len(limits) - 1

    def band_of(dist: float) -> int:
        for i in range(n_bands):
            if limits[i] <= dist < limits[i + 1]:
                return i
        return n_bands - 1

    _, _, _, matches = _match_all(preds_by_scene, gts_by_scene, 0.5)
    band_preds = [[[] for _ in range(n_bands)] for _ in preds_by_scene]
    band_gts = [[[] for _ in range(n_bands)] for _ in gts_by_scene]
    for s, gts in enumerate(gts_by_scene):
        for g in gts:
            if g.distance is None:
                raise ConfigError("distance-banded metrics need a distance on every ground truth")
            band_gts[s][band_of(g.distance)].append(g)
    for s, preds in enumerate(preds_by_scene):
        gts = gts_by_scene[s]
        g_boxes = np.array([g.box for g in gts], dtype=np.float64).reshape(len(gts), 4)
        for i, p in enumerate(preds):
            gt_hit = matches[s].get(i, -1)
            if gt_hit >= 0:
                b = band_of(gts[gt_hit].distance)
            elif len(gts):
                ious = iou_matrix(np.array([p.box], dtype=np.float64), g_boxes)[0]
                b = band_of(gts[int(np.argmax(ious))].distance) if ious.max() > 0 else n_bands - 1
            else:
                b = n_bands - 1
            band_preds[s][b].append(p)

    out = []
    for b in range(n_bands):
        preds_b = [band_preds[s][b] for s in range(len(preds_by_scene))]
        gts_b = [band_gts[s][b] for s in range(len(gts_by_scene))]
        sub = detection_metrics(preds_b, gts_b, iou_thresholds=(0.5,))
        has_gt = sub.n_gt > 0
        out.append(
            BandMetrics(
                lo=limits[b],
                hi=limits[b + 1],
                map50=sub.map50 if has_gt else None,
                tp=sub.tp,
                fp=sub.fp,
                fn=sub.fn,
                n_gt=sub.n_gt,
                n_pred=sub.n_pred,
            )
        )
    return out


def segmentation_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> tuple[float, float]:
    """(mIoU, mAcc) over a label map pair.

    mIoU averages IoU over classes present in either map; mAcc averages
    per-class recall over classes present in the ground truth.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ConfigError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    ious, accs = [], []
    for c in range(num_classes):
        p = pred == c
        g = gt == c
        union = (p | g).sum()
        if union:
            ious.append((p & g).sum() / union)
        if g.sum():
            accs.append((p & g).sum() / g.sum())
    miou = float(np.mean(ious)) if ious else 0.0
    macc = float(np.mean(accs)) if accs else 0.0
    return miou, macc


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """Pixel confusion counts, rows = ground truth, cols = prediction."""
    idx = gt.astype(np.int64) * num_classes + pred.astype(np.int64)
    return np.bincount(idx.ravel(), minlength=num_classes * num_classes).reshape(
        num_classes, num_classes
    )


def seg_metrics_from_confusion(cm: np.ndarray) -> tuple[float, float]:
    """(mIoU, mAcc) from pooled confusion counts."""
    tp = np.diag(cm).astype(np.float64)
    gt_total = cm.sum(axis=1).astype(np.float64)
    pred_total = cm.sum(axis=0).astype(np.float64)
    union = gt_total + pred_total - tp
    present = union > 0
    ious = tp[present] / union[present]
    in_gt = gt_total > 0
    accs = tp[in_gt] / gt_total[in_gt]
    miou = float(ious.mean()) if ious.size else 0.0
    macc = float(accs.mean()) if accs.size else 0.0
    return miou, macc


def power_of(m: LightField, m_lb: LightField) -> float:
    """Field power relative to the low-beam reference on the same scene."""
    if m.data.shape != m_lb.data.shape:
        raise ConfigError("fields must share dimensions")
    ref = float(m_lb.data.mean(dtype=np.float64))
    if ref <= 0:
        raise ConfigError("low-beam reference field has zero power")
    return float(m.data.mean(dtype=np.float64)) / ref
