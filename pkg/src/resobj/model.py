"""The toy detector.

Shared conv trunk, class/box subnets, an objectness subnet reading the
class subnet's penultimate features, and T residual subnets that refine
the objectness logits step by step. In 'isolated' gradient flow each
residual subnet sees its input features through stop_gradient and each
refinement step detaches the previous step's logits, so the residual
losses train only the residual subnets.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from resobj.anchors import AnchorLayout
from resobj.errors import ContractError
from resobj.tape import Tape, Tensor, conv2d, relu, stop_gradient

RESIDUAL_SOURCES = ("objectness_head", "class_head")
GRADIENT_FLOWS = ("isolated", "coupled")


@dataclass(frozen=True)
class ModelConfig:
    K: int
    layout: AnchorLayout
    T: int = 0
    in_channels: int = 3
    trunk_channels: int = 8
    head_depth: int = 2
    init_prior: float = 0.01
    residual_source: str = "objectness_head"
    gradient_flow: str = "isolated"
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ContractError("K must be >= 1")
        if self.T < 0:
            raise ContractError("T must be >= 0")
        if not 0 < self.init_prior < 1:
            raise ContractError("init_prior must be in (0, 1)")
        if self.residual_source not in RESIDUAL_SOURCES:
            raise ContractError(f"residual_source must be one of {RESIDUAL_SOURCES}")
        if self.gradient_flow not in GRADIENT_FLOWS:
            raise ContractError(f"gradient_flow must be one of {GRADIENT_FLOWS}")


@dataclass
class HeadOutputs:
    class_logits: Tensor  # [H, W, A*K], class k of template a at a*K + (k-1)
    box_deltas: Tensor  # [H, W, A*4]
    obj_logits: Tensor  # [H, W, A]
    residual_logits: list[Tensor]  # T maps of [H, W, A]
    tape: Tape


def parameter_specs(config: ModelConfig):
    """Canonical (name, shape, init_kind) list; fixes checkpoint order."""
    a = config.layout.per_cell
    ch = config.trunk_channels
    specs = []

    def conv_block(prefix, c_in, depth):
        c = c_in
        for i in range(depth):
            specs.append((f"{prefix}.conv{i}.w", (3, 3, c, ch), "conv"))
            specs.append((f"{prefix}.conv{i}.b", (ch,), "zero"))
            c = ch

    conv_block("trunk", config.in_channels, 2)
    conv_block("class_head", ch, config.head_depth)
    specs.append(("class_head.proj.w", (ch, a * config.K), "proj"))
    specs.append(("class_head.proj.b", (a * config.K,), "class_bias"))
    conv_block("box_head", ch, config.head_depth)
    specs.append(("box_head.proj.w", (ch, a * 4), "proj"))
    specs.append(("box_head.proj.b", (a * 4,), "zero"))
    conv_block("obj_head", ch, config.head_depth)
    specs.append(("obj_head.proj.w", (ch, a), "proj"))
    specs.append(("obj_head.proj.b", (a,), "obj_bias"))
    for t in range(1, config.T + 1):
        conv_block(f"res{t}", ch, config.head_depth)
        specs.append((f"res{t}.proj.w", (ch, a), "zero"))
        specs.append((f"res{t}.proj.b", (a,), "zero"))
    return specs


def subnet_of(name: str) -> str:
    return name.split(".", 1)[0]


def _rng_for(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return np.random.Generator(np.random.Philox(key=np.frombuffer(digest[:16], "<u8")))


def init_model(config: ModelConfig) -> dict[str, np.ndarray]:
    """Biased initialization: class scores start near init_prior, objectness
    near 1/K, and residual projections at exactly zero so every r_t == 0.

    Conv stacks use unit-gain (He) scaling: a from-scratch trunk with tiny
    weights passes no usable signal and the toy task never learns. The
    final projections keep the small 0.01 scale so the bias terms dominate
    the initial scores.
    """
    params = {}
    for name, shape, kind in parameter_specs(config):
        if kind == "conv":
            fan_in = shape[0] * shape[1] * shape[2]
            std = math.sqrt(2.0 / fan_in)
            params[name] = _rng_for(config.seed, name).normal(0.0, std, shape)
        elif kind == "proj":
            params[name] = _rng_for(config.seed, name).normal(0.0, 0.01, shape)
        elif kind == "zero":
            params[name] = np.zeros(shape)
        elif kind == "class_bias":
            b = -math.log((1.0 - config.init_prior) / config.init_prior)
            params[name] = np.full(shape, b)
        elif kind == "obj_bias":
            b = -math.log(max(config.K - 1, 1e-6))  # sigmoid(b) == 1/K
            params[name] = np.full(shape, b)
    return params


def forward(params: dict[str, np.ndarray], config: ModelConfig, scene_input) -> HeadOutputs:
    """Run the detector on one [C, H, W] scene, recording the tape."""
    c, h, w = scene_input.shape
    if c != config.in_channels or (h, w) != (config.layout.grid_h, config.layout.grid_w):
        raise ContractError(
            f"scene shape {scene_input.shape} does not match config "
            f"({config.in_channels}, {config.layout.grid_h}, {config.layout.grid_w})"
        )
    tape = Tape()
    p = {name: tape.param(name, value) for name, value in params.items()}
    missing = [n for n, _, _ in parameter_specs(config) if n not in p]
    if missing:
        raise ContractError(f"parameters missing for config: {missing[:3]}...")

    x = tape.leaf(np.ascontiguousarray(scene_input.transpose(1, 2, 0)))

    def conv_stack(prefix, x, depth):
        for i in range(depth):
            x = relu(conv2d(x, p[f"{prefix}.conv{i}.w"]) + p[f"{prefix}.conv{i}.b"])
        return x

    def project(prefix, x):
        return x @ p[f"{prefix}.proj.w"] + p[f"{prefix}.proj.b"]

    trunk = conv_stack("trunk", x, 2)
    class_penult = conv_stack("class_head", trunk, config.head_depth)
    class_logits = project("class_head", class_penult)
    box_deltas = project("box_head", conv_stack("box_head", trunk, config.head_depth))
    obj_penult = conv_stack("obj_head", class_penult, config.head_depth)
    obj_logits = project("obj_head", obj_penult)

    source = obj_penult if config.residual_source == "objectness_head" else class_penult
    residual_logits = []
    for t in range(1, config.T + 1):
        src = stop_gradient(source) if config.gradient_flow == "isolated" else source
        residual_logits.append(project(f"res{t}", conv_stack(f"res{t}", src, config.head_depth)))

    return HeadOutputs(class_logits, box_deltas, obj_logits, residual_logits, tape)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class RefineSteps:
    logits: list[Tensor]  # o_0 .. o_T, full maps
    masks: list[np.ndarray]  # mask_t for t = 1..T (bool, [H, W, A])
    min_positive: list[float]  # o^minp per step (score space)
    degenerate: bool  # no positive anchors: refinement is a no-op


def refine_objectness_train(
    o0: Tensor,
    residual_logits: list[Tensor],
    positive_mask: np.ndarray,
    valid_mask: np.ndarray,
    isolated: bool = True,
) -> RefineSteps:
    """Per-step masked refinement used at training time.

    Step t keeps the anchors whose previous score reaches the minimum
    positive score (all positives plus not-yet-suppressed negatives) and
    updates o_t = o_{t-1} + r_t on them. Ignore-band anchors never enter
    a mask. With isolated=True the previous logits are detached, so the
    step-t loss trains only the step-t subnet.
    """
    if positive_mask.shape != o0.shape or valid_mask.shape != o0.shape:
        raise ContractError("mask shapes must match the objectness map")
    tape = o0.tape
    degenerate = not positive_mask.any()
    steps = [o0]
    masks: list[np.ndarray] = []
    minps: list[float] = []
    prev = o0
    for r in residual_logits:
        prev_score = sigmoid_np(prev.data)
        if degenerate:
            mask = np.zeros_like(positive_mask)
            minp = math.nan
        else:
            minp = float(prev_score[positive_mask].min())
            mask = valid_mask & (prev_score >= minp)
        base = stop_gradient(prev) if isolated else prev
        step = base + r * tape.leaf(mask.astype(np.float64))
        steps.append(step)
        masks.append(mask)
        minps.append(minp)
        prev = step
    return RefineSteps(steps, masks, minps, degenerate)


def refine_objectness_infer(o0: np.ndarray, residual_logits) -> np.ndarray:
    """Inference-time combination: unmasked o_0 + sum of residual maps."""
    out = np.array(o0, dtype=np.float64, copy=True)
    for r in residual_logits:
        out += r
    return out
