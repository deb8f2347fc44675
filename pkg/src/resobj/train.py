"""SGD training loop with score-dynamics logging and AP evaluation.

Each log row records the running loss components plus the average
objectness score of a fixed held-out probe set, per refinement step,
split into positive and negative anchors - the quantities that show
whether refinement steps actually separate foregrounds from backgrounds.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from resobj.anchors import anchor_array, assign_labels
from resobj.data import Scene, SceneConfig, generate_scene, validation_config
from resobj.errors import ContractError, NumericError
from resobj.evalap import APResult, evaluate_ap
from resobj.checkpoint import save_checkpoint
from resobj.inference import detect
from resobj.losses import FocalConfig, build_loss_inputs, mode_loss
from resobj.model import (
    ModelConfig,
    forward,
    init_model,
    refine_objectness_train,
    sigmoid_np,
)
from resobj.tape import backward

MODES = ("CE", "FocalLoss", "Obj", "ResObj")
PROBE_SCENES = 64  # fixed held-out probe for the score curves
EVAL_SCENES = 64  # validation scenes for AP


@dataclass(frozen=True)
class TrainConfig:
    mode: str
    model: ModelConfig
    scenes: SceneConfig
    iterations: int = 4000
    batch_size: int = 1
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_decay: tuple = ((2.0 / 3.0, 0.1), (8.0 / 9.0, 0.1))
    log_interval: int = 200
    eval_interval: int = 0  # 0: evaluate AP at the end only
    seed: int = 0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}")
        if self.mode == "ResObj":
            if self.model.T < 1:
                raise ContractError("mode ResObj requires T >= 1")
        elif self.model.T != 0:
            # non-residual modes force T = 0
            object.__setattr__(self, "model", dataclasses.replace(self.model, T=0))
        if self.model.K != self.scenes.K:
            raise ContractError("model.K and scenes.K differ")
        if (self.model.layout.grid_h, self.model.layout.grid_w) != (
            self.scenes.grid_h,
            self.scenes.grid_w,
        ):
            raise ContractError("anchor grid must match the scene grid")
        if self.model.in_channels != self.scenes.channels:
            raise ContractError("model.in_channels must match scenes.channels")
        if self.iterations < 1 or self.batch_size < 1:
            raise ContractError("iterations and batch_size must be >= 1")
        object.__setattr__(
            self, "lr_decay", tuple((float(f), float(m)) for f, m in self.lr_decay)
        )

    @property
    def focal(self) -> FocalConfig:
        return FocalConfig(self.focal_gamma, self.focal_alpha)

    def uses_objectness(self) -> bool:
        return self.mode in ("Obj", "ResObj")


@dataclass
class TrainResult:
    params: dict
    header: list[str]
    rows: list[dict]
    final_ap: APResult


def lr_at(config: TrainConfig, iteration: int) -> float:
    lr = config.learning_rate
    for frac, factor in config.lr_decay:
        if iteration >= frac * config.iterations:
            lr *= factor
    return lr


class _Probe:
    """Fixed validation scenes with cached labels for score curves."""

    def __init__(self, config: TrainConfig):
        val_cfg = validation_config(config.scenes)
        anchors = anchor_array(config.model.layout)
        self.scenes = []
        h, w, a = (
            config.model.layout.grid_h,
            config.model.layout.grid_w,
            config.model.layout.per_cell,
        )
        for i in range(PROBE_SCENES):
            scene = generate_scene(val_cfg, i)
            labels = assign_labels(anchors, scene.gts)
            pos = labels.positive_mask.reshape(h, w, a)
            neg = labels.negative_mask.reshape(h, w, a)
            self.scenes.append((scene, pos, neg))

    def score_averages(self, params, config: TrainConfig):
        """Mean sigmoid objectness per refinement step over the pooled
        positive and negative probe anchors (the same anchors at every step)."""
        t_steps = config.model.T + 1
        pos_sum = np.zeros(t_steps)
        neg_sum = np.zeros(t_steps)
        pos_n = neg_n = 0
        for scene, pos, neg in self.scenes:
            out = forward(params, config.model, scene.input)
            steps = refine_objectness_train(
                out.obj_logits,
                out.residual_logits,
                pos,
                pos | neg,
                isolated=config.model.gradient_flow == "isolated",
            )
            pos_n += int(pos.sum())
            neg_n += int(neg.sum())
            for t, logits in enumerate(steps.logits):
                score = sigmoid_np(logits.data)
                pos_sum[t] += score[pos].sum()
                neg_sum[t] += score[neg].sum()
        pos_avg = pos_sum / pos_n if pos_n else np.full(t_steps, np.nan)
        neg_avg = neg_sum / neg_n if neg_n else np.full(t_steps, np.nan)
        return pos_avg, neg_avg


def evaluate_model(
    params,
    config: TrainConfig,
    scene_cfg: SceneConfig | None = None,
    n_scenes: int = EVAL_SCENES,
    score_threshold: float = 0.001,
    nms_threshold: float = 0.45,
):
    """AP of the current parameters on held-out scenes."""
    val_cfg = scene_cfg or validation_config(config.scenes)
    dets, gts = {}, {}
    for i in range(n_scenes):
        scene = generate_scene(val_cfg, i)
        dets[i] = detect(
            params,
            config.model,
            scene.input,
            score_threshold=score_threshold,
            nms_threshold=nms_threshold,
            use_objectness=config.uses_objectness(),
        )
        gts[i] = scene.gts
    return evaluate_ap(dets, gts)


def _loss_columns(config: TrainConfig) -> list[str]:
    cols = ["class", "box"]
    if config.uses_objectness():
        cols.append("objectness")
    cols.extend(f"res_t{t}" for t in range(1, config.model.T + 1))
    return cols


def metrics_header(config: TrainConfig) -> list[str]:
    cols = ["iteration", "total"] + _loss_columns(config)
    cols += [f"pos_obj_t{t}" for t in range(config.model.T + 1)]
    cols += [f"neg_obj_t{t}" for t in range(config.model.T + 1)]
    cols += ["ap", "ap50", "ap75"]
    return cols


def train(config: TrainConfig) -> TrainResult:
    params = init_model(config.model)
    velocity = {n: np.zeros_like(v) for n, v in params.items()}
    anchors = anchor_array(config.model.layout)
    layout = config.model.layout
    probe = _Probe(config)
    isolated = config.model.gradient_flow == "isolated"
    header = metrics_header(config)
    loss_cols = _loss_columns(config)
    rows: list[dict] = []
    final_ap = None

    def scene_loss(index: int):
        scene = generate_scene(config.scenes, index)
        labels = assign_labels(anchors, scene.gts)
        inputs = build_loss_inputs(labels, layout, anchors, scene.gts, config.model.K)
        out = forward(params, config.model, scene.input)
        report = mode_loss(
            config.mode, out, inputs, config.model.K, config.focal, isolated
        )
        return report

    def log_row(iteration, losses, with_ap):
        pos_avg, neg_avg = probe.score_averages(params, config)
        row = {"iteration": iteration}
        row.update(losses)
        for t in range(config.model.T + 1):
            row[f"pos_obj_t{t}"] = pos_avg[t]
            row[f"neg_obj_t{t}"] = neg_avg[t]
        if with_ap:
            ap = evaluate_model(params, config)
            row.update({"ap": ap.ap, "ap50": ap.ap50, "ap75": ap.ap75})
            return row, ap
        return row, None

    running = None
    for it in range(config.iterations):
        grads = None
        batch_losses = {c: 0.0 for c in loss_cols}
        batch_losses["total"] = 0.0
        for j in range(config.batch_size):
            report = scene_loss(it * config.batch_size + j)
            floats = report.floats()
            if not np.isfinite(floats["total"]):
                raise NumericError(
                    f"non-finite loss at iteration {it}: {floats}"
                )
            g = backward(report.total)
            if grads is None:
                grads = g
            else:
                for n in grads:
                    grads[n] += g[n]
            for c in loss_cols:
                batch_losses[c] += floats.get(c, 0.0) / config.batch_size
            batch_losses["total"] += floats["total"] / config.batch_size
        running = batch_losses

        if it % config.log_interval == 0:
            with_ap = config.eval_interval > 0 and it % config.eval_interval == 0 and it > 0
            row, _ = log_row(it, batch_losses, with_ap)
            rows.append(row)

        lr = lr_at(config, it)
        for n in params:
            velocity[n] = config.momentum * velocity[n] + grads[n]
            params[n] = params[n] - lr * velocity[n]

    row, final_ap = log_row(config.iterations, running or {}, True)
    rows.append(row)
    return TrainResult(params, header, rows, final_ap)


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_metrics(path, header: list[str], rows: list[dict]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(format_cell(row.get(c)) for c in header))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def train_to_dir(config: TrainConfig, out_dir) -> TrainResult:
    import os

    os.makedirs(out_dir, exist_ok=True)
    result = train(config)
    write_metrics(os.path.join(out_dir, "metrics.csv"), result.header, result.rows)
    save_checkpoint(
        result.params,
        config.model,
        config.iterations,
        os.path.join(out_dir, "model.ckpt"),
        mode=config.mode,
    )
    return result
