import numpy as np
import pytest

from resobj.anchors import Box
from resobj.errors import ContractError
from resobj.evalap import IOU_THRESHOLDS, APResult, evaluate_ap
from resobj.inference import Detection


def box_iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    iy = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def oracle_class_ap(dets_by_scene, gts_by_scene, cls, thr):
    """Brute-force PR enumeration, independent of the evaluator."""
    flat = []
    for sid in sorted(dets_by_scene):
        for pos, d in enumerate(dets_by_scene[sid]):
            if d.class_id == cls:
                flat.append((sid, pos, d))
    flat.sort(key=lambda r: (-r[2].score, r[0], r[1]))
    gts = {sid: [b for b, k in gts_by_scene[sid] if k == cls] for sid in gts_by_scene}
    n_gt = sum(len(v) for v in gts.values())
    used = {sid: [False] * len(gts[sid]) for sid in gts}
    flags = []
    for sid, _, d in flat:
        best, bj = -1.0, -1
        for j, g in enumerate(gts[sid]):
            if used[sid][j]:
                continue
            v = box_iou(d.box, g)
            if v >= thr and v > best:
                best, bj = v, j
        if bj >= 0:
            used[sid][bj] = True
            flags.append(True)
        else:
            flags.append(False)
    # PR points by prefix enumeration
    points = []
    tp = fp = 0
    for hit in flags:
        tp, fp = tp + hit, fp + (not hit)
        points.append((tp / n_gt, tp / (tp + fp)))
    levels = np.linspace(0, 1, 101)
    total = 0.0
    for r in levels:
        best = 0.0
        for rec, prec in points:
            if rec >= r and prec > best:
                best = prec
        total += best
    return total / 101


def oracle_ap(dets_by_scene, gts_by_scene):
    classes = sorted({k for g in gts_by_scene.values() for _, k in g})
    per_thr = []
    by_thr = {}
    for thr in IOU_THRESHOLDS:
        vals = [
            oracle_class_ap(dets_by_scene, gts_by_scene, c, thr)
            for c in classes
            if any(k == c for g in gts_by_scene.values() for _, k in g)
        ]
        by_thr[round(thr, 2)] = float(np.mean(vals))
        per_thr.append(float(np.mean(vals)))
    return APResult(float(np.mean(per_thr)), by_thr[0.5], by_thr[0.75])


def det(cls, score, box, anchor=0):
    return Detection(cls, score, box, anchor)


def test_perfect_detections_ap_one():
    gts = {0: [(Box(1, 1, 4, 4), 1), (Box(5, 5, 7, 9), 2)]}
    dets = {0: [det(1, 1.0, Box(1, 1, 4, 4)), det(2, 1.0, Box(5, 5, 7, 9))]}
    r = evaluate_ap(dets, gts)
    assert r.ap == 1.0 and r.ap50 == 1.0 and r.ap75 == 1.0


def test_no_detections_ap_zero():
    gts = {0: [(Box(1, 1, 4, 4), 1)]}
    r = evaluate_ap({0: []}, gts)
    assert r.ap == 0.0


def test_late_false_positive_keeps_ap50():
    gts = {0: [(Box(0, 0, 2, 2), 1)]}
    dets = {0: [det(1, 0.9, Box(0, 0, 2, 2)), det(1, 0.8, Box(5, 5, 6, 6), 1)]}
    r = evaluate_ap(dets, gts)
    assert r.ap50 == 1.0
    assert r.ap50 == pytest.approx(oracle_class_ap(dets, gts, 1, 0.5), abs=1e-12)


def test_all_classes_empty_is_error():
    with pytest.raises(ContractError):
        evaluate_ap({0: []}, {0: []})


def random_micro_instance(rng):
    n_scenes = int(rng.integers(1, 3))
    gts = {}
    dets = {}
    for sid in range(n_scenes):
        gts[sid] = []
        for _ in range(int(rng.integers(0, 4))):
            x1, y1 = rng.uniform(0, 6, 2)
            gts[sid].append(
                (Box(x1, y1, x1 + rng.uniform(1, 4), y1 + rng.uniform(1, 4)),
                 int(rng.integers(1, 3)))
            )
        scene_dets = []
        for i in range(int(rng.integers(0, 6))):
            if gts[sid] and rng.random() < 0.6:
                base, k = gts[sid][rng.integers(0, len(gts[sid]))]
                jitter = rng.uniform(-0.8, 0.8, 4)
                x1, y1 = base.x1 + jitter[0], base.y1 + jitter[1]
                x2 = max(base.x2 + jitter[2], x1 + 0.3)
                y2 = max(base.y2 + jitter[3], y1 + 0.3)
                box = Box(x1, y1, x2, y2)
                if rng.random() < 0.2:
                    k = int(rng.integers(1, 3))
            else:
                x1, y1 = rng.uniform(0, 6, 2)
                box = Box(x1, y1, x1 + rng.uniform(0.5, 3), y1 + rng.uniform(0.5, 3))
                k = int(rng.integers(1, 3))
            scene_dets.append(det(k, float(np.round(rng.random(), 2)), box, i))
        scene_dets.sort(key=lambda d: -d.score)
        dets[sid] = scene_dets
    if not any(gts.values()):
        gts[0].append((Box(0, 0, 1, 1), 1))
    return dets, gts


def test_evaluator_matches_oracle_1000_micro_instances():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        dets, gts = random_micro_instance(rng)
        got = evaluate_ap(dets, gts)
        want = oracle_ap(dets, gts)
        assert got.ap == pytest.approx(want.ap, abs=1e-12)
        assert got.ap50 == pytest.approx(want.ap50, abs=1e-12)
        assert got.ap75 == pytest.approx(want.ap75, abs=1e-12)


def test_ap50_at_least_ap75_random():
    rng = np.random.default_rng(123)
    for _ in range(200):
        dets, gts = random_micro_instance(rng)
        r = evaluate_ap(dets, gts)
        assert r.ap50 >= r.ap75


def test_class_without_gts_excluded():
    gts = {0: [(Box(0, 0, 2, 2), 1)]}
    # class 2 detections are false positives for a class with no gts:
    # class 2 never enters the mean
    dets = {0: [det(1, 0.9, Box(0, 0, 2, 2)), det(2, 0.95, Box(0, 0, 2, 2), 1)]}
    r = evaluate_ap(dets, gts)
    assert r.ap50 == 1.0
