"""Deterministic synthetic detection scenes with extreme fg/bg imbalance.

Scene i is generated from a Philox stream keyed by (base_seed, i), so any
scene is reproducible without generating the ones before it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from resobj.anchors import AnchorLayout, Box, assign_labels, anchor_array
from resobj.errors import ContractError, FormatError

SCENE_MAGIC = b"ROBJSCNE"
VALIDATION_SEED_OFFSET = 1_000_003  # keeps train/val Philox keys disjoint


@dataclass(frozen=True)
class SceneConfig:
    grid_h: int = 32
    grid_w: int = 32
    channels: int = 3
    K: int = 3
    objects_min: int = 1
    objects_max: int = 3
    size_min: int = 3
    size_max: int = 6
    noise_std: float = 0.2
    # distractors: dimmed class-pattern rectangles rendered as background.
    # They produce hard negatives (the class head fires on them), which is
    # what makes the fg/bg split genuinely imbalance-limited.
    distractors_min: int = 2
    distractors_max: int = 6
    distractor_dim: tuple = (0.5, 0.8)
    base_seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ContractError("K must be >= 1")
        if not (1 <= self.size_min <= self.size_max):
            raise ContractError("bad object size range")
        if self.size_max > min(self.grid_h, self.grid_w):
            raise ContractError("objects must fit inside the grid")
        if not (0 <= self.objects_min <= self.objects_max):
            raise ContractError("bad objects-per-scene range")
        if not (0 <= self.distractors_min <= self.distractors_max):
            raise ContractError("bad distractors-per-scene range")
        object.__setattr__(self, "distractor_dim", tuple(self.distractor_dim))


@dataclass
class Scene:
    input: np.ndarray  # [C, grid_h, grid_w] float64
    gts: list[tuple[Box, int]]


def class_pattern(k: int, K: int, channels: int) -> np.ndarray:
    """Distinct per-channel intensity signature for class k in 1..K."""
    phase = 2 * np.pi * (k - 1) / K
    offs = 2 * np.pi * np.arange(channels) / max(channels, 1)
    return 0.75 + 0.25 * np.sin(phase + offs)


def generate_scene(config: SceneConfig, index: int) -> Scene:
    if index < 0:
        raise ContractError("scene index must be >= 0")
    rng = np.random.Generator(np.random.Philox(key=[config.base_seed, index]))
    h, w = config.grid_h, config.grid_w
    img = np.zeros((config.channels, h, w))

    def draw_rect():
        ow = int(rng.integers(config.size_min, config.size_max + 1))
        oh = int(rng.integers(config.size_min, config.size_max + 1))
        x1 = int(rng.integers(0, w - ow + 1))
        y1 = int(rng.integers(0, h - oh + 1))
        return x1, y1, ow, oh

    # distractors first: real objects overwrite them, so object regions
    # stay class-faithful
    lo, hi = config.distractor_dim
    for _ in range(int(rng.integers(config.distractors_min, config.distractors_max + 1))):
        k = int(rng.integers(1, config.K + 1))
        x1, y1, ow, oh = draw_rect()
        dim = rng.uniform(lo, hi)
        img[:, y1 : y1 + oh, x1 : x1 + ow] = (
            dim * class_pattern(k, config.K, config.channels)[:, None, None]
        )

    gts = []
    for _ in range(int(rng.integers(config.objects_min, config.objects_max + 1))):
        k = int(rng.integers(1, config.K + 1))
        x1, y1, ow, oh = draw_rect()
        img[:, y1 : y1 + oh, x1 : x1 + ow] = class_pattern(
            k, config.K, config.channels
        )[:, None, None]
        gts.append((Box(float(x1), float(y1), float(x1 + ow), float(y1 + oh)), k))
    if config.noise_std > 0:
        img += rng.normal(0.0, config.noise_std, size=img.shape)
    return Scene(img, gts)


def validation_config(config: SceneConfig) -> SceneConfig:
    """Held-out scene stream: same distribution, disjoint generator keys."""
    import dataclasses

    return dataclasses.replace(
        config, base_seed=config.base_seed + VALIDATION_SEED_OFFSET
    )


def imbalance_stats(config: SceneConfig, layout: AnchorLayout, n_scenes: int) -> dict:
    """Mean positive/negative anchor counts over generated scenes."""
    if n_scenes < 1:
        raise ContractError("n_scenes must be >= 1")
    anchors = anchor_array(layout)
    total_p = total_n = 0
    for i in range(n_scenes):
        labels = assign_labels(anchors, generate_scene(config, i).gts)
        total_p += labels.P
        total_n += labels.N
    denom = total_p + total_n
    return {
        "mean_P": total_p / n_scenes,
        "mean_N": total_n / n_scenes,
        "positive_fraction": total_p / denom if denom else 0.0,
    }


def save_scene(scene: Scene, index: int, path) -> None:
    meta = {
        "index": index,
        "shape": list(scene.input.shape),
        "gts": [[b.x1, b.y1, b.x2, b.y2, k] for b, k in scene.gts],
    }
    blob = json.dumps(meta).encode()
    with open(path, "wb") as f:
        f.write(SCENE_MAGIC)
        f.write(struct.pack("<II", 1, len(blob)))
        f.write(blob)
        f.write(scene.input.astype("<f4").tobytes())


def load_scene(path) -> Scene:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != SCENE_MAGIC:
        raise FormatError(f"{path}: not a scene file")
    version, mlen = struct.unpack_from("<II", raw, 8)
    if version != 1:
        raise FormatError(f"{path}: unsupported scene version {version}")
    try:
        meta = json.loads(raw[16 : 16 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad scene metadata: {e}") from e
    shape = tuple(meta["shape"])
    payload = raw[16 + mlen :]
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, need {expected}")
    img = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
    gts = [(Box(x1, y1, x2, y2), int(k)) for x1, y1, x2, y2, k in meta["gts"]]
    return Scene(img, gts)
