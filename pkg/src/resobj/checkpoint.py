"""Binary model checkpoints.

Layout: 8-byte magic, little-endian u32 version, u32 metadata length,
UTF-8 JSON metadata (tensor names/shapes, model config, mode, training
iteration), then each tensor as little-endian float32 in metadata order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from resobj.anchors import AnchorLayout
from resobj.errors import FormatError
from resobj.model import ModelConfig, parameter_specs

MAGIC = b"ROBJCKPT"
VERSION = 1


def config_to_dict(config: ModelConfig) -> dict:
    return {
        "K": config.K,
        "layout": {
            "grid_h": config.layout.grid_h,
            "grid_w": config.layout.grid_w,
            "templates": [list(t) for t in config.layout.templates],
        },
        "T": config.T,
        "in_channels": config.in_channels,
        "trunk_channels": config.trunk_channels,
        "head_depth": config.head_depth,
        "init_prior": config.init_prior,
        "residual_source": config.residual_source,
        "gradient_flow": config.gradient_flow,
        "seed": config.seed,
    }


def config_from_dict(d: dict) -> ModelConfig:
    lay = d["layout"]
    layout = AnchorLayout(lay["grid_h"], lay["grid_w"], tuple(map(tuple, lay["templates"])))
    fields = {k: d[k] for k in d if k != "layout"}
    return ModelConfig(layout=layout, **fields)


def save_checkpoint(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    iteration: int,
    path,
    mode: str = "Obj",
) -> None:
    names = [name for name, _, _ in parameter_specs(config)]
    meta = {
        "iteration": iteration,
        "mode": mode,
        "config": config_to_dict(config),
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    blob = json.dumps(meta).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(params[n].astype("<f4").tobytes())


def load_checkpoint(path):
    """Returns (params, config, iteration, mode); params are float64."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 16 + mlen:
        raise FormatError(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[16 : 16 + mlen].decode())
        config = config_from_dict(meta["config"])
        tensors = meta["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: bad checkpoint metadata: {e}") from e

    expected = {name: shape for name, shape, _ in parameter_specs(config)}
    if [t["name"] for t in tensors] != list(expected):
        raise FormatError(f"{path}: tensor list does not match config")
    for t in tensors:
        if tuple(t["shape"]) != expected[t["name"]]:
            raise FormatError(
                f"{path}: tensor {t['name']!r} has shape {tuple(t['shape'])}, "
                f"config requires {expected[t['name']]}"
            )

    payload = raw[16 + mlen :]
    total = sum(int(np.prod(t["shape"])) for t in tensors) * 4
    if len(payload) != total:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, need {total}")
    params = {}
    offset = 0
    for t in tensors:
        n = int(np.prod(t["shape"]))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset)
        params[t["name"]] = arr.astype(np.float64).reshape(t["shape"])
        offset += n * 4
    return params, config, int(meta["iteration"]), meta["mode"]
