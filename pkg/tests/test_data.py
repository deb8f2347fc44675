import numpy as np
import pytest

from resobj.anchors import AnchorLayout
from resobj.data import (
    Scene,
    SceneConfig,
    class_pattern,
    generate_scene,
    imbalance_stats,
    load_scene,
    save_scene,
    validation_config,
)
from resobj.errors import ContractError, FormatError


def test_noiseless_scene_nonzero_exactly_inside_box():
    cfg = SceneConfig(
        grid_h=16, grid_w=16, K=1, objects_min=1, objects_max=1, noise_std=0.0,
        distractors_min=0, distractors_max=0,
    )
    scene = generate_scene(cfg, 4)
    assert len(scene.gts) == 1
    box, k = scene.gts[0]
    assert k == 1
    mask = np.zeros((16, 16), dtype=bool)
    mask[int(box.y1) : int(box.y2), int(box.x1) : int(box.x2)] = True
    nonzero = np.any(scene.input != 0.0, axis=0)
    assert np.array_equal(nonzero, mask)


def test_same_config_index_identical_bytes():
    cfg = SceneConfig(base_seed=11)
    a = generate_scene(cfg, 123)
    b = generate_scene(cfg, 123)
    assert a.input.tobytes() == b.input.tobytes()
    assert a.gts == b.gts


def test_different_indices_differ():
    cfg = SceneConfig(base_seed=11)
    assert generate_scene(cfg, 0).input.tobytes() != generate_scene(cfg, 1).input.tobytes()


def test_validation_stream_disjoint():
    cfg = SceneConfig(base_seed=11)
    val = validation_config(cfg)
    assert val.base_seed != cfg.base_seed
    assert generate_scene(cfg, 0).input.tobytes() != generate_scene(val, 0).input.tobytes()


def test_class_patterns_distinct():
    K = 7
    pats = [tuple(class_pattern(k, K, 3)) for k in range(1, K + 1)]
    assert len(set(pats)) == K


def test_classes_within_range_and_boxes_in_bounds():
    cfg = SceneConfig(K=5, base_seed=2)
    for i in range(50):
        scene = generate_scene(cfg, i)
        for box, k in scene.gts:
            assert 1 <= k <= 5
            assert 0 <= box.x1 < box.x2 <= cfg.grid_w
            assert 0 <= box.y1 < box.y2 <= cfg.grid_h


def test_no_objects_config():
    cfg = SceneConfig(objects_min=0, objects_max=0)
    layout = AnchorLayout(32, 32, ((3.5, 1.0),))
    stats = imbalance_stats(cfg, layout, 10)
    assert stats["mean_P"] == 0.0
    assert stats["positive_fraction"] == 0.0


def test_bad_size_range_rejected():
    with pytest.raises(ContractError):
        SceneConfig(size_min=5, size_max=3)
    with pytest.raises(ContractError):
        SceneConfig(size_min=1, size_max=40)


def test_scene_dump_roundtrip(tmp_path):
    cfg = SceneConfig(base_seed=8)
    scene = generate_scene(cfg, 3)
    path = tmp_path / "scene.bin"
    save_scene(scene, 3, path)
    loaded = load_scene(path)
    assert np.allclose(loaded.input, scene.input, atol=1e-6)  # float32 storage
    assert loaded.gts == scene.gts


def test_scene_dump_bad_magic(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"garbage!" + b"\x00" * 16)
    with pytest.raises(FormatError):
        load_scene(path)
