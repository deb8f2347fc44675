"""Score combination, per-class greedy NMS, and the detect pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from resobj.anchors import Box, anchor_array, decode_array, iou_matrix
from resobj.errors import ContractError
from resobj.model import ModelConfig, forward, refine_objectness_infer, sigmoid_np


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: Box
    anchor: int = -1  # source anchor index; NMS tie-break key


def combine_scores(class_probs: np.ndarray, objectness: np.ndarray | None) -> np.ndarray:
    """Class-specific scores: p_k * o per anchor, or p_k when objectness
    is absent (plain CE / focal models)."""
    if objectness is None:
        return class_probs
    return class_probs * objectness[:, None]


def nms(
    detections: list[Detection], iou_threshold: float, per_class_cap: int | None = None
) -> list[Detection]:
    """Greedy per-class suppression at IoU > iou_threshold.

    Candidates are visited by descending score (ties: lower anchor index);
    survivors are returned sorted by descending score. per_class_cap stops
    a class early once that many boxes were kept (survivors come out in
    score order, so a cap never changes the kept prefix).
    """
    if not 0 < iou_threshold <= 1:
        raise ContractError("iou_threshold must be in (0, 1]")
    kept: list[Detection] = []
    for cls in sorted({d.class_id for d in detections}):
        group = sorted(
            (d for d in detections if d.class_id == cls),
            key=lambda d: (-d.score, d.anchor),
        )
        boxes = np.array([d.box.as_tuple() for d in group])
        alive = np.ones(len(group), dtype=bool)
        chosen: list[int] = []
        while True:
            idx = np.flatnonzero(alive)
            if idx.size == 0:
                break
            head = idx[0]
            chosen.append(head)
            if per_class_cap is not None and len(chosen) >= per_class_cap:
                break
            alive[head] = False
            rest = idx[1:]
            if rest.size:
                overlaps = iou_matrix(boxes[head : head + 1], boxes[rest])[0]
                alive[rest[overlaps > iou_threshold]] = False
        kept.extend(group[i] for i in chosen)
    return sorted(kept, key=lambda d: (-d.score, d.class_id, d.anchor))


@dataclass
class AnchorScores:
    """Raw per-anchor model outputs, ready for thresholding and NMS."""

    class_probs: np.ndarray  # [A, K]
    objectness: np.ndarray | None  # [A] final combined score, or None
    boxes: np.ndarray  # [A, 4] decoded, not yet clipped


def score_anchors(
    params, config: ModelConfig, scene_input, use_objectness: bool = True
) -> AnchorScores:
    out = forward(params, config, scene_input)
    a_total = config.layout.total
    class_probs = sigmoid_np(out.class_logits.data).reshape(a_total, config.K)
    objectness = None
    if use_objectness:
        o_final = refine_objectness_infer(
            out.obj_logits.data, [r.data for r in out.residual_logits]
        )
        objectness = sigmoid_np(o_final).reshape(a_total)
    deltas = out.box_deltas.data.reshape(a_total, 4)
    boxes = decode_array(anchor_array(config.layout), deltas)
    return AnchorScores(class_probs, objectness, boxes)


def detections_from_scores(
    scores: AnchorScores,
    bounds: tuple[float, float],
    score_threshold: float = 0.001,
    nms_threshold: float = 0.45,
    max_detections: int = 100,
) -> list[Detection]:
    combined = combine_scores(scores.class_probs, scores.objectness)
    anchor_idx, class_idx = np.nonzero(combined >= score_threshold)
    w, h = bounds
    clipped = scores.boxes.copy()
    clipped[:, 0::2] = np.clip(clipped[:, 0::2], 0.0, w)
    clipped[:, 1::2] = np.clip(clipped[:, 1::2], 0.0, h)
    candidates = []
    for a, k in zip(anchor_idx, class_idx):
        x1, y1, x2, y2 = clipped[a]
        if x2 <= x1 or y2 <= y1:  # clipped away entirely
            continue
        candidates.append(
            Detection(int(k) + 1, float(combined[a, k]), Box(x1, y1, x2, y2), int(a))
        )
    return nms(candidates, nms_threshold, per_class_cap=max_detections)[:max_detections]


def detect(
    params,
    config: ModelConfig,
    scene_input,
    score_threshold: float = 0.001,
    nms_threshold: float = 0.45,
    max_detections: int = 100,
    use_objectness: bool = True,
) -> list[Detection]:
    scores = score_anchors(params, config, scene_input, use_objectness)
    bounds = (float(config.layout.grid_w), float(config.layout.grid_h))
    return detections_from_scores(
        scores, bounds, score_threshold, nms_threshold, max_detections
    )


def detection_records(scene_id, detections) -> list[str]:
    """CSV records: scene_id,class,score,x1,y1,x2,y2."""
    return [
        f"{scene_id},{d.class_id},{float(d.score)!r},{float(d.box.x1)!r},"
        f"{float(d.box.y1)!r},{float(d.box.x2)!r},{float(d.box.y2)!r}"
        for d in detections
    ]


def write_detections(path, detections_by_scene: dict) -> None:
    lines = ["scene_id,class,score,x1,y1,x2,y2"]
    for sid in sorted(detections_by_scene):
        lines.extend(detection_records(sid, detections_by_scene[sid]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
