import numpy as np
import pytest

from resobj.anchors import AnchorLayout
from resobj.checkpoint import load_checkpoint, save_checkpoint
from resobj.errors import FormatError
from resobj.model import ModelConfig, init_model


def config_k(k, t=1):
    return ModelConfig(K=k, layout=AnchorLayout(4, 4, ((2.0, 1.0),)), T=t, seed=5)


def test_roundtrip_float32_exact(tmp_path):
    config = config_k(3)
    params = init_model(config)
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, config, 42, path, mode="ResObj")
    loaded, config2, it, mode = load_checkpoint(path)
    assert it == 42 and mode == "ResObj"
    assert config2 == config
    for n in params:
        assert np.array_equal(loaded[n], params[n].astype(np.float32).astype(np.float64))


def test_load_save_byte_identical(tmp_path):
    config = config_k(2)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(init_model(config), config, 7, p1)
    params, cfg, it, mode = load_checkpoint(p1)
    save_checkpoint(params, cfg, it, p2, mode=mode)
    assert p1.read_bytes() == p2.read_bytes()


def test_truncated_file_rejected(tmp_path):
    config = config_k(2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_model(config), config, 0, path)
    raw = path.read_bytes()
    bad = tmp_path / "trunc.ckpt"
    bad.write_bytes(raw[: len(raw) - 10])
    with pytest.raises(FormatError, match="payload"):
        load_checkpoint(bad)


def test_bad_magic_rejected(tmp_path):
    bad = tmp_path / "junk.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(FormatError, match="not a checkpoint"):
        load_checkpoint(bad)


def test_k_mismatch_names_tensor(tmp_path):
    # a K=3 checkpoint forced under a K=5 config must name the bad tensor
    config3 = config_k(3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_model(config3), config3, 0, path)
    import json
    import struct

    raw = path.read_bytes()
    _, mlen = struct.unpack_from("<II", raw, 8)
    meta = json.loads(raw[16 : 16 + mlen].decode())
    meta["config"]["K"] = 5  # claim a different config than the tensors
    blob = json.dumps(meta).encode()
    forged = raw[:8] + struct.pack("<II", 1, len(blob)) + blob + raw[16 + mlen :]
    bad = tmp_path / "forged.ckpt"
    bad.write_bytes(forged)
    with pytest.raises(FormatError, match="class_head.proj"):
        load_checkpoint(bad)
