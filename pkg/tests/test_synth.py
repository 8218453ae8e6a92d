from __future__ import annotations

import numpy as np
import pytest

from saldet.imgio import load_ground_truth, load_image, load_manifest
from saldet.synth import SynthConfig, cmd_synth, plan, render_image, split_sizes


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_fixed_seed_is_byte_identical(tmp_path):
    cfg = SynthConfig(count_per_class=3, seed=9, size=96, defect_extent=(30, 40))
    cmd_synth(cfg, tmp_path / "a")
    cmd_synth(cfg, tmp_path / "b")
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a == b and len(a) > 3


def test_different_seed_differs(tmp_path):
    base = dict(count_per_class=2, size=96, defect_extent=(30, 40))
    cmd_synth(SynthConfig(seed=1, **base), tmp_path / "a")
    cmd_synth(SynthConfig(seed=2, **base), tmp_path / "b")
    assert _tree(tmp_path / "a") != _tree(tmp_path / "b")


def test_count_ten_gives_55_rows():
    rows = plan(SynthConfig(count_per_class=10))
    assert len(rows) == 55
    assert sum(c == 0 for _, c, _, _ in rows) == 5


def test_dataset_on_disk_is_valid(small_dataset):
    man, gts, root = small_dataset
    back = load_manifest(root / "manifest.csv")
    assert back.entries == man.entries
    assert len(man.entries) == 66
    sizes = {}
    for e in man.entries:
        img = load_image(man.resolve(e))
        sizes[e.image_id] = (img.width, img.height)
        assert img.channels == 1
    assert load_ground_truth(root / "ground_truth.jsonl") == gts
    for g in gts:
        assert g.bbox.fits(*sizes[g.image_id])
    labelled = {g.image_id for g in gts}
    assert labelled == {e.image_id for e in man.entries if not e.image_id.startswith("background")}


def test_multi_label_boxes_for_exposed_bar(small_dataset):
    _, gts, _ = small_dataset
    bars = [g for g in gts if g.image_id.startswith("exposed_bar")]
    assert bars and all(g.labels == (2, 3) for g in bars)


def test_split_sizes():
    assert split_sizes(10) == (7, 2, 1)
    assert split_sizes(1000) == (700, 200, 100)
    assert sum(split_sizes(13)) == 13


def test_every_split_holds_every_class():
    rows = plan(SynthConfig(count_per_class=10))
    for c in range(1, 6):
        assert {s for _, k, s, _ in rows if k == c} == {"train", "val", "test"}


@pytest.mark.parametrize("cls", range(6))
def test_render_boxes_in_bounds(cls):
    cfg = SynthConfig()
    for s in range(5):
        img, annots = render_image(cls, (0, cls, s), cfg)
        assert (img.width, img.height) == (256, 256)
        assert len(annots) == (0 if cls == 0 else 1)
        for box, labels in annots:
            assert box.fits(256, 256)


def test_cracks_are_dark_and_efflorescence_bright():
    cfg = SynthConfig()
    for cls, sign in ((1, -1), (4, 1)):
        img, annots = render_image(cls, (1, cls), cfg)
        b = annots[0][0]
        px = img.pixels.astype(float)
        inside = px[b.y:b.y2, b.x:b.x2]
        assert sign * (np.percentile(inside, 50 + sign * 49) - np.median(px)) > 20


def test_test_split_contrast_override():
    cfg = SynthConfig(test_crack_contrast=(10.0, 10.0), crack_contrast=(80.0, 80.0))
    hard, _ = render_image(1, 3, cfg, split="test")
    easy, _ = render_image(1, 3, cfg, split="train")
    assert hard.pixels.astype(int).min() > easy.pixels.astype(int).min()


@pytest.mark.parametrize("kw", [dict(count_per_class=0), dict(size=32), dict(counts={7: 3}),
                                dict(background_fraction=1.0), dict(size=64)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)
