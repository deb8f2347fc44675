"""Anchor grids, IoU, ground-truth assignment, and box encoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from resobj.errors import ContractError

LOG_CLAMP = 4.0  # |log size delta| cap at decode time, prevents overflow


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ContractError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class AnchorLayout:
    grid_h: int
    grid_w: int
    templates: tuple[tuple[float, float], ...]  # (scale, aspect) pairs

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ContractError("grid dims must be >= 1")
        if not self.templates:
            raise ContractError("at least one anchor template required")
        for scale, aspect in self.templates:
            if scale <= 0 or aspect <= 0:
                raise ContractError(f"bad template (scale={scale}, aspect={aspect})")
        object.__setattr__(self, "templates", tuple(map(tuple, self.templates)))

    @property
    def per_cell(self) -> int:
        return len(self.templates)

    @property
    def total(self) -> int:
        return self.grid_h * self.grid_w * self.per_cell


def generate_anchors(layout: AnchorLayout) -> list[Box]:
    """One box per (cell, template), row-major cells then template index."""
    return [Box(*row) for row in anchor_array(layout)]


def anchor_array(layout: AnchorLayout) -> np.ndarray:
    """Same anchors as generate_anchors, as an [A, 4] float64 array."""
    tpl = np.asarray(layout.templates, dtype=np.float64)
    w = tpl[:, 0] * np.sqrt(tpl[:, 1])
    h = tpl[:, 0] / np.sqrt(tpl[:, 1])
    cy, cx = np.meshgrid(
        np.arange(layout.grid_h) + 0.5, np.arange(layout.grid_w) + 0.5, indexing="ij"
    )
    cx = np.repeat(cx.reshape(-1), layout.per_cell)
    cy = np.repeat(cy.reshape(-1), layout.per_cell)
    w = np.tile(w, layout.grid_h * layout.grid_w)
    h = np.tile(h, layout.grid_h * layout.grid_w)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def iou(a: Box, b: Box) -> float:
    return float(iou_matrix(np.array([a.as_tuple()]), np.array([b.as_tuple()]))[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of [N, 4] and [M, 4] box arrays."""
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


POSITIVE, NEGATIVE, IGNORE = 1, 0, 2


@dataclass
class AnchorLabels:
    status: np.ndarray  # int8, one of POSITIVE/NEGATIVE/IGNORE per anchor
    class_ids: np.ndarray  # int32, matched class for positives, 0 elsewhere
    gt_index: np.ndarray  # int32, matched gt for positives, -1 elsewhere
    P: int = field(init=False)
    N: int = field(init=False)

    def __post_init__(self):
        self.P = int((self.status == POSITIVE).sum())
        self.N = int((self.status == NEGATIVE).sum())

    @property
    def positive_mask(self) -> np.ndarray:
        return self.status == POSITIVE

    @property
    def negative_mask(self) -> np.ndarray:
        return self.status == NEGATIVE

    @property
    def ignore_mask(self) -> np.ndarray:
        return self.status == IGNORE


def assign_labels(
    anchors,
    gts: list[tuple[Box, int]],
    pos_thresh: float = 0.5,
    neg_lo: float = 0.0,
    neg_hi: float = 0.4,
) -> AnchorLabels:
    """Threshold assignment: positive at max-IoU >= pos_thresh (argmax gt,
    ties to the lowest gt index), negative in [neg_lo, neg_hi), else ignore.
    """
    if neg_hi > pos_thresh:
        raise ContractError("neg_hi must be <= pos_thresh")
    arr = anchors if isinstance(anchors, np.ndarray) else np.array(
        [a.as_tuple() for a in anchors]
    )
    n = arr.shape[0]
    status = np.full(n, NEGATIVE, dtype=np.int8)
    class_ids = np.zeros(n, dtype=np.int32)
    gt_index = np.full(n, -1, dtype=np.int32)
    if gts:
        gt_arr = np.array([g[0].as_tuple() for g in gts])
        gt_cls = np.array([g[1] for g in gts], dtype=np.int32)
        m = iou_matrix(arr, gt_arr)
        best = m.max(axis=1)
        best_gt = m.argmax(axis=1)  # first max wins: lowest gt index
        pos = best >= pos_thresh
        neg = (best >= neg_lo) & (best < neg_hi)
        status[pos] = POSITIVE
        status[~pos & ~neg] = IGNORE
        class_ids[pos] = gt_cls[best_gt[pos]]
        gt_index[pos] = best_gt[pos]
    return AnchorLabels(status, class_ids, gt_index)


def encode_box_targets(anchor: Box, gt: Box) -> tuple[float, float, float, float]:
    d = encode_array(
        np.array([anchor.as_tuple()]), np.array([gt.as_tuple()])
    )[0]
    return tuple(d)


def encode_array(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    gcx = gts[:, 0] + gw / 2
    gcy = gts[:, 1] + gh / 2
    return np.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1
    )


def decode_box(anchor: Box, deltas) -> Box:
    out = decode_array(np.array([anchor.as_tuple()]), np.asarray([deltas]))[0]
    return Box(*out)


def decode_array(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(np.clip(deltas[:, 2], -LOG_CLAMP, LOG_CLAMP))
    h = ah * np.exp(np.clip(deltas[:, 3], -LOG_CLAMP, LOG_CLAMP))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
