from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import random_classifier
from saldet import cli
from saldet.detect import Detection, NmsConfig, load_detections, nms_per_class, save_detections
from saldet.imgio import BBox, GroundTruthBox, Image, load_image, save_ground_truth, save_image
from saldet.morphology import load_floatmap
from saldet.saliency import SmoothGradConfig, image_saliency, save_checkpoint


@pytest.fixture
def ckpt(tmp_path):
    p = tmp_path / "clf.bin"
    save_checkpoint(random_classifier(0), p)
    return p


def _err(capsys) -> dict:
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


def _random_dets(seed, n=120):
    rng = np.random.default_rng(seed)
    dets = []
    for _ in range(n):
        x, y = map(int, rng.integers(0, 60, 2))
        s = np.where(rng.random(5) < 0.5, 0.0, np.round(rng.random(5), 3))
        if not s.any():
            s[0] = 0.5
        dets.append(Detection(f"i{rng.integers(3)}", BBox(x, y, 30, 30), tuple(float(v) for v in s)))
    return dets


# ---------------------------------------------------------------------------
# exit codes and error format
# ---------------------------------------------------------------------------
def test_unknown_subcommand_is_input_error(capsys):
    assert cli.main(["frobnicate"]) == 1
    err = _err(capsys)
    assert err["exit_code"] == 1 and err["error"] == "UsageError"


def test_missing_file_is_input_error(tmp_path, capsys):
    rc = cli.main(["nms", "--detections", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")])
    assert rc == 1
    err = _err(capsys)
    assert "nope.jsonl" in err["message"]


def test_malformed_detections_is_input_error(tmp_path, capsys):
    p = tmp_path / "d.jsonl"
    p.write_text('{"image_id": "a", "bbox": [0, 0, 1, 1], "scores": [1, 0, 0, 0]}\n')
    assert cli.main(["nms", "--detections", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "line 1" in _err(capsys)["message"]


def test_internal_error_exit_code(monkeypatch, tmp_path, capsys):
    def boom(*a, **k):
        raise RuntimeError("kaput")
    monkeypatch.setattr(cli, "load_detections", boom)
    p = tmp_path / "d.jsonl"
    p.write_text("")
    assert cli.main(["nms", "--detections", str(p), "--out", str(tmp_path / "o")]) == 2
    assert _err(capsys) == {"error": "RuntimeError", "exit_code": 2, "message": "kaput"}


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as ei:
        cli.main(["--help"])
    assert ei.value.code == 0


# ---------------------------------------------------------------------------
# thin wrappers
# ---------------------------------------------------------------------------
def test_nms_flag_reproduces_library(tmp_path):
    dets = _random_dets(1)
    src = tmp_path / "d.jsonl"
    save_detections(dets, src)
    out = tmp_path / "n.jsonl"
    assert cli.main(["nms", "--detections", str(src), "--out", str(out), "--iou-threshold", "0.45"]) == 0
    assert load_detections(out) == nms_per_class(dets, NmsConfig(0.45))


def test_eval_perfect_fixture(tmp_path, capsys):
    gts = [GroundTruthBox(f"i{c}", BBox(0, 0, 20, 20), (c,)) for c in range(1, 6)]
    gts.append(GroundTruthBox("i2", BBox(30, 30, 20, 20), (2, 3)))
    save_ground_truth(gts, tmp_path / "gt.jsonl")
    dets = [Detection(g.image_id, g.bbox, tuple(1.0 if c in g.labels else 0.0 for c in range(1, 6)))
            for g in gts]
    save_detections(dets, tmp_path / "d.jsonl")
    rc = cli.main(["eval", "--detections", str(tmp_path / "d.jsonl"), "--ground-truth",
                   str(tmp_path / "gt.jsonl"), "--out", str(tmp_path / "r.json"),
                   "--table", str(tmp_path / "r.txt")])
    assert rc == 0
    table = capsys.readouterr().out
    mrow = [l for l in table.splitlines() if l.startswith("mAP")][0]
    assert mrow.split()[1:] == ["1.0000", "1.0000", "1.0000"]
    assert json.loads((tmp_path / "r.json").read_text())["map"] == {"0.5": 1.0, "0.75": 1.0, "0.95": 1.0}


def test_saliency_one_tile(tmp_path, ckpt):
    rng = np.random.default_rng(2)
    img = Image(rng.integers(0, 256, (64, 64), dtype=np.uint8))
    save_image(img, tmp_path / "im.pgm")
    rc = cli.main(["saliency", "--checkpoint", str(ckpt), "--image", str(tmp_path / "im.pgm"),
                   "--out", str(tmp_path / "s"), "--n-samples", "4", "--seed", "3"])
    assert rc == 0
    fm = load_floatmap(tmp_path / "s.f32")
    ref = image_saliency(random_classifier(0), img, SmoothGradConfig(n_samples=4, rng_seed=3))
    assert np.array_equal(fm.values, ref.values.astype(np.float32).astype(np.float64))
    vis = load_image(tmp_path / "s.pgm")
    assert (vis.width, vis.height, vis.channels) == (64, 64, 1)


def test_propose_enhance_detect_chain(tmp_path, ckpt):
    img = np.full((96, 96), 100, dtype=np.uint8)
    img[30:60, 40:44] = 30
    save_image(Image(img), tmp_path / "im.pgm")
    assert cli.main(["saliency", "--checkpoint", str(ckpt), "--image", str(tmp_path / "im.pgm"),
                     "--out", str(tmp_path / "f"), "--fused", "--n-samples", "2"]) == 0
    assert cli.main(["propose", "--fused", str(tmp_path / "f.f32"), "--out", str(tmp_path / "b.jsonl"),
                     "--image-id", "im"]) == 0
    rows = [json.loads(l) for l in (tmp_path / "b.jsonl").read_text().splitlines()]
    assert rows and all(set(r) == {"image_id", "bbox", "score"} for r in rows)
    assert cli.main(["enhance", "--image", str(tmp_path / "im.pgm"), "--boxes", str(tmp_path / "b.jsonl"),
                     "--out", str(tmp_path / "e.pgm")]) == 0
    enh = load_image(tmp_path / "e.pgm").pixels
    assert (enh.astype(int) >= img).all() and (enh != img).any()
    assert cli.main(["detect-ref", "--checkpoint", str(ckpt), "--image", str(tmp_path / "e.pgm"),
                     "--out", str(tmp_path / "d.jsonl"), "--score-floor", "0"]) == 0
    assert all(d.image_id == "e" for d in load_detections(tmp_path / "d.jsonl"))


def test_config_file_and_flag_precedence(tmp_path):
    dets = _random_dets(4)
    save_detections(dets, tmp_path / "d.jsonl")
    (tmp_path / "c.json").write_text(json.dumps({"nms.iou_threshold": 0.1}))
    base = ["nms", "--detections", str(tmp_path / "d.jsonl"), "--config", str(tmp_path / "c.json")]
    assert cli.main(base + ["--out", str(tmp_path / "a.jsonl")]) == 0
    assert load_detections(tmp_path / "a.jsonl") == nms_per_class(dets, NmsConfig(0.1))
    assert cli.main(base + ["--out", str(tmp_path / "b.jsonl"), "--iou-threshold", "0.7"]) == 0
    assert load_detections(tmp_path / "b.jsonl") == nms_per_class(dets, NmsConfig(0.7))


def test_bad_config_key_is_input_error(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"nms.bogus": 1}))
    (tmp_path / "d.jsonl").write_text("")
    rc = cli.main(["nms", "--detections", str(tmp_path / "d.jsonl"), "--out", str(tmp_path / "o"),
                   "--config", str(tmp_path / "c.json")])
    assert rc == 1 and "bogus" in _err(capsys)["message"]


def test_synth_train_pipeline_round(tmp_path, capsys):
    ds = tmp_path / "ds"
    assert cli.main(["synth", "--out", str(ds), "--count-per-class", "3", "--seed", "1"]) == 0
    assert (ds / "manifest.csv").read_text().count("\n") == 1 + 17
    assert cli.main(["train", "--manifest", str(ds / "manifest.csv"), "--ground-truth",
                     str(ds / "ground_truth.jsonl"), "--out", str(tmp_path / "clf.bin"),
                     "--epochs", "1", "--loss-trace", str(tmp_path / "loss.csv")]) == 0
    assert (tmp_path / "loss.csv").exists()
    capsys.readouterr()
    rc = cli.main(["pipeline", "--manifest", str(ds / "manifest.csv"), "--ground-truth",
                   str(ds / "ground_truth.jsonl"), "--checkpoint", str(tmp_path / "clf.bin"),
                   "--out", str(tmp_path / "run"), "--n-samples", "2"])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert "map" in json.dumps(summary)
    assert (tmp_path / "run" / "provenance.json").exists()
