from __future__ import annotations

import time

import numpy as np
import pytest

from saldet.imgio import load_ground_truth
from saldet.pipeline import PatchSamplingConfig, TrainConfig, train_reference, training_patches
from saldet.saliency import PatchClassifier, train
from saldet.synth import SynthConfig, cmd_synth


def random_classifier(seed: int, scale: float = 1.0) -> PatchClassifier:
    """Glorot-initialized classifier with randomized (non-zero) biases."""
    clf = PatchClassifier.initialize(seed)
    rng = np.random.default_rng(seed + 1000)
    params = {k: v * scale for k, v in clf.params.items()}
    params["conv1_b"] = rng.uniform(-0.1, 0.1, 8)
    params["conv2_b"] = rng.uniform(-0.1, 0.1, 16)
    params["fc_b"] = rng.uniform(-0.1, 0.1, 6)
    return PatchClassifier(params)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """12 images per defect class plus background, written to disk once per session."""
    root = tmp_path_factory.mktemp("ds")
    man = cmd_synth(SynthConfig(count_per_class=12, seed=5), root)
    return man, load_ground_truth(root / "ground_truth.jsonl"), root


@pytest.fixture(scope="session")
def corpus_dataset(tmp_path_factory):
    """100 images per defect class; one crop per box keeps the corpus varied."""
    root = tmp_path_factory.mktemp("corpus")
    man = cmd_synth(SynthConfig(count_per_class=100, seed=5), root)
    return man, load_ground_truth(root / "ground_truth.jsonl"), root


@pytest.fixture(scope="session")
def patch_corpus(corpus_dataset):
    """600 raw patches, 100 per class; backgrounds avoid every defect box."""
    man, gts, _ = corpus_dataset
    cfg = PatchSamplingConfig(seed=0, defect_copies=1, partial_negatives=0, brightness_aug=0.0,
                              background_aug=0.0)
    pts = []
    for split in ("train", "val", "test"):
        pts += training_patches(man, gts, cfg, split=split)
    rng = np.random.default_rng(0)
    out = []
    for c in range(6):
        idx = [i for i, (_, y) in enumerate(pts) if y == c]
        pick = rng.choice(idx, size=100, replace=len(idx) < 100)
        out += [pts[i] for i in pick]
    return out


@pytest.fixture(scope="session")
def trained_clf(patch_corpus):
    clf, trace = train(PatchClassifier.initialize(0), patch_corpus, 20, 0.05, rng_seed=0)
    return clf, trace


# ---------------------------------------------------------------------------
# reference model shared by the detector examples and the end-to-end check
# ---------------------------------------------------------------------------
E2E_SYNTH = SynthConfig(count_per_class=40, counts={1: 500, 2: 100, 3: 100, 4: 100, 5: 100}, seed=0,
                        crack_contrast=(15.0, 80.0), test_crack_contrast=(12.0, 22.0))
E2E_SAMPLING = PatchSamplingConfig(seed=1)
E2E_TRAIN = TrainConfig()


@pytest.fixture(scope="session")
def reference_model(tmp_path_factory):
    """Synthetic dataset with faint test-split cracks plus the classifier trained on it.

    Returns ``(manifest, gts, root, clf, seconds spent)``.
    """
    t0 = time.perf_counter()
    root = tmp_path_factory.mktemp("e2e")
    man = cmd_synth(E2E_SYNTH, root)
    gts = load_ground_truth(root / "ground_truth.jsonl")
    clf, _ = train_reference(man, gts, E2E_SAMPLING, E2E_TRAIN)
    return man, gts, root, clf, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# acceptance summary
# ---------------------------------------------------------------------------
ACCEPTANCE: dict = {}


def record(name: str, ok: bool, detail: str = "") -> bool:
    """Note a criterion outcome for the end-of-run summary and echo it."""
    ACCEPTANCE[name] = (bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
