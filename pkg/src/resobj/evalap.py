"""Average-precision evaluation over IoU thresholds 0.50:0.05:0.95.

Matching per class: detections over all scenes by descending score, each
consuming at most one unmatched ground truth with IoU >= threshold
(highest IoU wins, ties to the lower gt index). Precision-recall curves
are integrated at 101 interpolation points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from resobj.anchors import iou_matrix
from resobj.errors import ContractError

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class APResult:
    ap: float  # mean over IoU thresholds 0.50:0.05:0.95
    ap50: float
    ap75: float


def _interpolated_ap(tp: np.ndarray, fp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    # precision envelope: best precision at recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(interp.mean())


def _class_pr(dets, gts_by_scene, cls, threshold):
    """tp/fp flags for one class at one IoU threshold, plus gt count."""
    records = []
    for sid in sorted(dets):
        for pos, d in enumerate(dets[sid]):
            if d.class_id == cls:
                records.append((-d.score, sid, pos, d))
    records.sort(key=lambda r: r[:3])
    n_gt = 0
    gt_boxes = {}
    for sid in gts_by_scene:
        boxes = [b for b, k in gts_by_scene[sid] if k == cls]
        gt_boxes[sid] = np.array([b.as_tuple() for b in boxes]) if boxes else None
        n_gt += len(boxes)
    matched = {sid: set() for sid in gts_by_scene}
    tp = np.zeros(len(records))
    fp = np.zeros(len(records))
    for i, (_, sid, _, d) in enumerate(records):
        boxes = gt_boxes.get(sid)
        best_iou, best_j = 0.0, -1
        if boxes is not None:
            ious = iou_matrix(np.array([d.box.as_tuple()]), boxes)[0]
            for j, v in enumerate(ious):
                if j in matched[sid] or v < threshold:
                    continue
                if v > best_iou or best_j < 0:
                    best_iou, best_j = v, j
        if best_j >= 0:
            matched[sid].add(best_j)
            tp[i] = 1.0
        else:
            fp[i] = 1.0
    return tp, fp, n_gt


def evaluate_ap(
    detections_by_scene: dict,
    gts_by_scene: dict,
    iou_thresholds=IOU_THRESHOLDS,
) -> APResult:
    classes = sorted(
        {k for gts in gts_by_scene.values() for _, k in gts}
    )
    if not classes:
        raise ContractError("no ground-truth objects in any scene")
    per_threshold = []
    ap50 = ap75 = None
    for thr in iou_thresholds:
        vals = []
        for cls in classes:
            tp, fp, n_gt = _class_pr(detections_by_scene, gts_by_scene, cls, thr)
            if n_gt == 0:
                continue  # class absent from this gt set: excluded from the mean
            vals.append(_interpolated_ap(tp, fp, n_gt))
        mean_ap = float(np.mean(vals))
        per_threshold.append(mean_ap)
        if abs(thr - 0.5) < 1e-9:
            ap50 = mean_ap
        if abs(thr - 0.75) < 1e-9:
            ap75 = mean_ap
    result = APResult(float(np.mean(per_threshold)), ap50, ap75)
    return result
