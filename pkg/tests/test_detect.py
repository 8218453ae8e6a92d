from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import random_classifier
from oracles import box_iou, nms_oracle
from saldet.imgio import BBox, FormatError, Image, iou
from saldet.detect import (Detection, NmsConfig, detect_reference, load_detections,
                           nms_per_class, prune_by_saliency, save_detections, window_origins)
from saldet.morphology import FloatMap
from saldet.synth import SynthConfig, render_image


def _det(box, scores, image_id="a"):
    return Detection(image_id, BBox(*box), tuple(scores))


def _random_dets(rng, n, n_images=3, size=100):
    dets = []
    for _ in range(n):
        w, h = rng.integers(5, 40, size=2)
        x, y = rng.integers(0, size - 40, size=2)
        s = np.where(rng.random(5) < 0.5, 0.0, np.round(rng.random(5), 2))
        if not s.any():
            s[rng.integers(5)] = 0.5
        dets.append(Detection(f"im{rng.integers(n_images)}", BBox(int(x), int(y), int(w), int(h)),
                              tuple(float(v) for v in s)))
    return dets


def survivor_pairs(out, dets) -> set:
    """Map NMS output back to (input index, class) pairs; output keeps input order."""
    pairs = set()
    j = 0
    for o in out:
        while not (dets[j].image_id == o.image_id and dets[j].bbox == o.bbox
                   and all(s == 0.0 or s == t for s, t in zip(o.scores, dets[j].scores))):
            j += 1
        pairs |= {(j, k) for k, s in enumerate(o.scores) if s > 0.0}
        j += 1
    return pairs


# ---------------------------------------------------------------------------
# iou
# ---------------------------------------------------------------------------
def test_iou_properties_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = BBox(*map(int, rng.integers(1, 20, 4)))
        b = BBox(*map(int, rng.integers(1, 20, 4)))
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0
        assert (v == 1.0) == (a == b)
        assert v == pytest.approx(box_iou(a.as_list(), b.as_list()), abs=1e-15)


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------
@pytest.mark.parametrize("scores", [(0, 0, 0, 0, 0), (0.5, 0, 0, 0), (1.2, 0, 0, 0, 0), (-0.1, 1, 0, 0, 0)])
def test_detection_invariants(scores):
    with pytest.raises(ValueError):
        _det((0, 0, 5, 5), scores)


# ---------------------------------------------------------------------------
# NMS
# ---------------------------------------------------------------------------
def test_single_detection_unchanged():
    d = _det((0, 0, 10, 10), (0.3, 0, 0, 0, 0.7))
    assert nms_per_class([d]) == [d]


def test_overlapping_same_class_keeps_best():
    # IoU 0.6: (0,0,10,10) vs (0,0,10,6) shares 60 of 100 px
    a = _det((0, 0, 10, 6), (0.8, 0, 0, 0, 0))
    b = _det((0, 0, 10, 10), (0.9, 0, 0, 0, 0))
    assert iou(a.bbox, b.bbox) == pytest.approx(0.6)
    assert nms_per_class([a, b], NmsConfig(0.45)) == [b]


def test_no_cross_class_suppression():
    a = _det((0, 0, 10, 10), (0.9, 0, 0, 0, 0))
    b = _det((0, 0, 10, 10), (0, 0.8, 0, 0, 0))
    assert nms_per_class([a, b]) == [a, b]


def test_multi_label_survivor_zeroes_suppressed_class():
    a = _det((0, 0, 10, 10), (0.9, 0, 0, 0, 0))
    b = _det((1, 0, 10, 10), (0.8, 0.6, 0, 0, 0))
    assert nms_per_class([a, b]) == [a, _det((1, 0, 10, 10), (0, 0.6, 0, 0, 0))]


def test_images_do_not_suppress_each_other():
    a = _det((0, 0, 10, 10), (0.9, 0, 0, 0, 0), "x")
    b = _det((0, 0, 10, 10), (0.8, 0, 0, 0, 0), "y")
    assert nms_per_class([a, b]) == [a, b]


def test_score_floor_and_ties():
    a = _det((0, 0, 10, 10), (0.04, 0, 0, 0, 0))
    assert nms_per_class([a], NmsConfig(score_floor=0.05)) == []
    b = _det((0, 0, 10, 10), (0.5, 0, 0, 0, 0))
    c = _det((1, 1, 10, 10), (0.5, 0, 0, 0, 0))
    assert nms_per_class([c, b]) == [c]


@pytest.mark.parametrize("seed", range(10))
def test_nms_matches_greedy_oracle(seed):
    rng = np.random.default_rng(seed)
    dets = _random_dets(rng, 200)
    cfg = NmsConfig(0.45, 0.05)
    out = nms_per_class(dets, cfg)
    assert survivor_pairs(out, dets) == nms_oracle(dets, 0.45, 0.05)


def test_nms_antichain_subset_and_monotone():
    rng = np.random.default_rng(42)
    for _ in range(20):
        dets = _random_dets(rng, 60, n_images=1)
        inputs = {(d.image_id, d.bbox) for d in dets}
        counts = []
        for th in (0.1, 0.3, 0.45, 0.7, 0.9):
            out = nms_per_class(dets, NmsConfig(th, 0.0))
            assert {(d.image_id, d.bbox) for d in out} <= inputs
            for k in range(5):
                kept = [d.bbox for d in out if d.scores[k] > 0]
                for i, p in enumerate(kept):
                    for q in kept[i + 1:]:
                        assert iou(p, q) <= th
            counts.append(len(survivor_pairs(out, dets)))
        assert counts == sorted(counts)


def test_nms_config_validation():
    with pytest.raises(ValueError):
        NmsConfig(iou_threshold=1.5)
    with pytest.raises(ValueError):
        NmsConfig(score_floor=-0.1)


# ---------------------------------------------------------------------------
# reference detector
# ---------------------------------------------------------------------------
def test_window_origins():
    assert window_origins(64, 32) == [0]
    assert window_origins(100, 32) == [0, 32, 36]
    assert window_origins(128, 32) == [0, 32, 64]
    with pytest.raises(ValueError):
        window_origins(63, 32)


def test_detect_reference_flat_background_is_empty(reference_model):
    clf = reference_model[3]
    flat = Image(np.full((128, 128), 128, dtype=np.uint8))
    assert detect_reference(flat, clf, stride=32, score_floor=0.5) == []


@pytest.mark.parametrize("seed", range(5))
def test_detect_reference_centered_crack(reference_model, seed):
    clf = reference_model[3]
    img, annots = render_image(1, (99, seed), SynthConfig())
    b = annots[0][0]
    y = min(max(round(b.y + b.h / 2 - 32), 0), img.height - 64)
    x = min(max(round(b.x + b.w / 2 - 32), 0), img.width - 64)
    crop = Image(img.pixels[y:y + 64, x:x + 64].copy())
    dets = detect_reference(crop, clf, stride=32, score_floor=0.5, image_id="c")
    assert len(dets) == 1
    assert int(np.argmax(dets[0].scores)) == 0
    assert dets[0].bbox == BBox(0, 0, 64, 64)


def test_detect_reference_validation():
    clf = random_classifier(0)
    img = Image(np.zeros((64, 64), dtype=np.uint8))
    with pytest.raises(ValueError):
        detect_reference(img, clf, score_floor=1.0 + 1e-9)
    with pytest.raises(ValueError):
        detect_reference(img, clf, stride=0)
    with pytest.raises(ValueError):
        detect_reference(Image(np.zeros((40, 80), dtype=np.uint8)), clf)


# ---------------------------------------------------------------------------
# detection files
# ---------------------------------------------------------------------------
def test_detection_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    for i in range(10):
        dets = _random_dets(rng, int(rng.integers(0, 30)))
        p = tmp_path / f"d{i}.jsonl"
        save_detections(dets, p)
        assert load_detections(p) == dets


def test_empty_detection_file(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert load_detections(p) == []


@pytest.mark.parametrize("record, needle", [
    ({"image_id": "a", "bbox": [0, 0, 1, 1], "scores": [0.1, 0.2, 0.3, 0.4]}, "scores"),
    ({"image_id": "a", "bbox": [0, 0, 1, 1], "scores": [1.5, 0, 0, 0, 0]}, "scores"),
    ({"image_id": "a", "scores": [1, 0, 0, 0, 0]}, "bbox"),
    ({"image_id": "a", "bbox": [0, 0, 0, 1], "scores": [1, 0, 0, 0, 0]}, ""),
])
def test_detection_file_errors(tmp_path, record, needle):
    p = tmp_path / "bad.jsonl"
    good = {"image_id": "a", "bbox": [0, 0, 1, 1], "scores": [1, 0, 0, 0, 0]}
    p.write_text(json.dumps(good) + "\n" + json.dumps(record) + "\n")
    with pytest.raises(FormatError, match=f"line 2: .*{needle}"):
        load_detections(p)


# ---------------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------------
def _fused(v):
    return FloatMap(np.asarray(v, dtype=np.float64))


def test_prune_floor_zero_is_identity():
    rng = np.random.default_rng(5)
    dets = _random_dets(rng, 30, n_images=1)
    assert prune_by_saliency(dets, _fused(rng.random((100, 100))), 0.0) == dets


def test_prune_drops_zero_region_and_keeps_ten_percent():
    v = np.zeros((60, 60))
    v[0:10, 0:10] = 1.0          # 100 salient px
    v[30:32, 0:5] = 1.0          # 10 px inside the second box below
    zero = _det((40, 40, 10, 10), (1, 0, 0, 0, 0))
    tenth = _det((0, 30, 10, 10), (1, 0, 0, 0, 0))
    assert prune_by_saliency([zero, tenth], _fused(v), 0.05) == [tenth]


def test_prune_monotone_in_floor():
    rng = np.random.default_rng(6)
    v = rng.random((100, 100)) ** 4
    dets = _random_dets(rng, 50, n_images=1)
    prev = dets
    for floor in np.linspace(0, 1, 11):
        out = prune_by_saliency(dets, _fused(v), float(floor))
        assert set(map(id, out)) <= set(map(id, prev))
        prev = out


def test_prune_dimension_mismatch():
    with pytest.raises(ValueError):
        prune_by_saliency([_det((50, 50, 20, 20), (1, 0, 0, 0, 0))], _fused(np.zeros((60, 60))))
