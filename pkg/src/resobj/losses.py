"""Training objectives.

Everything is built from tape primitives so one finite-difference oracle
covers every loss. Binary CE is composed in the max(z,0) - z*t +
log(1+exp(-|z|)) form; the naive sigmoid-then-log route would overflow at
the saturated logits the biased initialization produces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from resobj.anchors import AnchorLabels, AnchorLayout, encode_array
from resobj.errors import ContractError
from resobj.model import HeadOutputs, RefineSteps, refine_objectness_train
from resobj.tape import Tensor, log, masked_select, pow_const, relu, sigmoid, tsum, smooth_l1

SMOOTH_L1_BETA = 1.0 / 9.0


@dataclass(frozen=True)
class FocalConfig:
    gamma: float = 2.0
    alpha: float = 0.25

    def __post_init__(self):
        if self.gamma < 0:
            raise ContractError("gamma must be >= 0")
        if not 0 < self.alpha < 1:
            raise ContractError("alpha must be in (0, 1)")


@dataclass
class LossReport:
    total: Tensor  # scalar; exactly the sum of the components
    components: dict[str, Tensor]
    normalizer: float
    degenerate: bool = False

    def floats(self) -> dict[str, float]:
        out = {k: float(v.data) for k, v in self.components.items()}
        out["total"] = float(self.total.data)
        return out


@dataclass
class LossInputs:
    """Per-scene label maps shaped like the head outputs."""

    positive: np.ndarray  # [H, W, A] bool
    negative: np.ndarray
    valid: np.ndarray  # positive | negative (ignore band excluded)
    onehot: np.ndarray  # [H, W, A*K] float, 1 at each positive's class slot
    box_targets: np.ndarray  # [H, W, A*4] encoded targets, 0 off-positives
    P: int


def build_loss_inputs(
    labels: AnchorLabels,
    layout: AnchorLayout,
    anchors_arr: np.ndarray,
    gts,
    K: int,
) -> LossInputs:
    h, w, a = layout.grid_h, layout.grid_w, layout.per_cell
    pos = labels.positive_mask
    cls = labels.class_ids[pos]
    if pos.any() and (cls.min() < 1 or cls.max() > K):
        raise ContractError(f"positive class outside 1..{K}")
    onehot = np.zeros(layout.total * K)
    idx = np.flatnonzero(pos)
    onehot[idx * K + (cls - 1)] = 1.0
    box_targets = np.zeros((layout.total, 4))
    if len(idx):
        gt_arr = np.array([g[0].as_tuple() for g in gts])
        box_targets[idx] = encode_array(anchors_arr[idx], gt_arr[labels.gt_index[idx]])
    return LossInputs(
        positive=pos.reshape(h, w, a),
        negative=labels.negative_mask.reshape(h, w, a),
        valid=(pos | labels.negative_mask).reshape(h, w, a),
        onehot=onehot.reshape(h, w, a * K),
        box_targets=box_targets.reshape(h, w, a * 4),
        P=labels.P,
    )


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary CE in the stable form, targets in {0, 1}."""
    t = logits.tape.leaf(targets)
    abs_z = relu(logits) + relu(0.0 - logits)
    return relu(logits) - logits * t - log(sigmoid(abs_z))


def class_loss(class_logits: Tensor, inputs: LossInputs, K: int, positives_only: bool) -> Tensor:
    """Raw sum of K-way one-vs-all sigmoid CE over the selected anchors."""
    anchor_mask = inputs.positive if positives_only else inputs.valid
    mask = np.repeat(anchor_mask, K, axis=-1)
    sel = masked_select(class_logits, mask)
    return tsum(bce_with_logits(sel, inputs.onehot[mask]))


def focal_loss(class_logits: Tensor, inputs: LossInputs, K: int, cfg: FocalConfig) -> Tensor:
    """Per-term modulated CE over all non-ignore anchors, / max(P, 1)."""
    mask = np.repeat(inputs.valid, K, axis=-1)
    sel = masked_select(class_logits, mask)
    t = inputs.onehot[mask]
    ce = bce_with_logits(sel, t)
    # 1 - p_t is sigmoid(-z) on target-1 terms and sigmoid(z) on target-0
    modulator = sigmoid(sel * (1.0 - 2.0 * t))
    alpha_t = np.where(t == 1.0, cfg.alpha, 1.0 - cfg.alpha)
    term = sel.tape.leaf(alpha_t) * pow_const(modulator, cfg.gamma) * ce
    return tsum(term) * (1.0 / max(inputs.P, 1))


def box_loss(box_deltas: Tensor, inputs: LossInputs) -> Tensor:
    """Smooth-L1 over positive anchors' deltas, / max(P, 1)."""
    mask = np.repeat(inputs.positive, 4, axis=-1)
    sel = masked_select(box_deltas, mask)
    diff = sel - sel.tape.leaf(inputs.box_targets[mask])
    return tsum(smooth_l1(diff, beta=SMOOTH_L1_BETA)) * (1.0 / max(inputs.P, 1))


def _report(components: dict[str, Tensor], normalizer: float, degenerate=False) -> LossReport:
    total = None
    for v in components.values():
        total = v if total is None else total + v
    return LossReport(total, components, normalizer, degenerate)


def ce_total_loss(outputs: HeadOutputs, inputs: LossInputs, K: int) -> LossReport:
    norm = float(max(inputs.P, 1))
    return _report(
        {
            "class": class_loss(outputs.class_logits, inputs, K, False) * (1.0 / norm),
            "box": box_loss(outputs.box_deltas, inputs),
        },
        norm,
    )


def focal_total_loss(
    outputs: HeadOutputs, inputs: LossInputs, K: int, cfg: FocalConfig
) -> LossReport:
    norm = float(max(inputs.P, 1))
    return _report(
        {
            "class": focal_loss(outputs.class_logits, inputs, K, cfg),
            "box": box_loss(outputs.box_deltas, inputs),
        },
        norm,
    )


def _objectness_components(
    outputs: HeadOutputs, inputs: LossInputs, K: int, steps: RefineSteps | None
) -> tuple[dict[str, Tensor], bool]:
    norm = 1.0 / max(inputs.P, 1)
    obj_sel = masked_select(outputs.obj_logits, inputs.valid)
    obj_targets = inputs.positive[inputs.valid].astype(np.float64)
    components = {
        "class": class_loss(outputs.class_logits, inputs, K, True) * norm,
        "box": box_loss(outputs.box_deltas, inputs),
        "objectness": tsum(bce_with_logits(obj_sel, obj_targets)) * norm,
    }
    degenerate = False
    if steps is not None:
        degenerate = steps.degenerate
        for t, mask in enumerate(steps.masks, start=1):
            sel = masked_select(steps.logits[t], mask)
            targets = inputs.positive[mask].astype(np.float64)
            components[f"res_t{t}"] = tsum(bce_with_logits(sel, targets)) * norm
    return components, degenerate


def objectness_total_loss(outputs: HeadOutputs, inputs: LossInputs, K: int) -> LossReport:
    """Mode Obj (T = 0): binary objectness BCE + positives-only class + box."""
    components, _ = _objectness_components(outputs, inputs, K, None)
    return _report(components, float(max(inputs.P, 1)))


def residual_objectness_loss(
    outputs: HeadOutputs, inputs: LossInputs, K: int, isolated: bool = True
) -> LossReport:
    """Mode ResObj: the Obj objective plus one masked BCE per refinement step."""
    steps = refine_objectness_train(
        outputs.obj_logits,
        outputs.residual_logits,
        inputs.positive,
        inputs.valid,
        isolated=isolated,
    )
    components, degenerate = _objectness_components(outputs, inputs, K, steps)
    return _report(components, float(max(inputs.P, 1)), degenerate)


def mode_loss(
    mode: str,
    outputs: HeadOutputs,
    inputs: LossInputs,
    K: int,
    focal: FocalConfig | None = None,
    isolated: bool = True,
) -> LossReport:
    if mode == "CE":
        return ce_total_loss(outputs, inputs, K)
    if mode == "FocalLoss":
        return focal_total_loss(outputs, inputs, K, focal or FocalConfig())
    if mode == "Obj":
        return objectness_total_loss(outputs, inputs, K)
    if mode == "ResObj":
        return residual_objectness_loss(outputs, inputs, K, isolated)
    raise ContractError(f"unknown mode {mode!r}")


def negative_loss_ratio(
    class_logits: np.ndarray, obj_logits: np.ndarray, negative_mask: np.ndarray, K: int
):
    """Aggregate negative CE of the K-way class head vs the binary
    objectness head, and their ratio (None when the denominator is 0).

    Unweighted sums: whenever every per-class negative probability equals
    the objectness probability the ratio is K exactly.
    """
    neg_cls = np.repeat(negative_mask, K, axis=-1)
    # -log(1 - sigmoid(z)) == log(1 + e^z), stable at any logit
    l_fl = math.fsum(np.logaddexp(0.0, class_logits[neg_cls]))
    l_obj = math.fsum(np.logaddexp(0.0, obj_logits[negative_mask]))
    ratio = l_fl / l_obj if l_obj != 0.0 else None
    return l_fl, l_obj, ratio
