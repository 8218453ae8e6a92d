"""End-to-end orchestration: training data, per-image pipeline, reports."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .detect import (Detection, NmsConfig, detect_reference, detection_to_json, load_detections,
                     nms_per_class, prune_by_saliency)
from .evaluation import DEFAULT_THRESHOLDS, evaluate, save_report
from .imgio import (BBox, Image, atomic_write_text, iou, load_ground_truth, load_image, load_manifest,
                    save_image, to_grayscale)
from .morphology import StructuringElement, linearity_map, save_floatmap, save_floatmap_pgm
from .proposals import FusedMap, ProposalConfig, box_score, enhance, fuse_maps, propose_boxes
from .saliency.network import PATCH, PatchClassifier, load_checkpoint, train
from .saliency.smoothgrad import SmoothGradConfig, image_saliency

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class DetectorConfig:
    stride: int = 24
    score_floor: float = 0.5
    detections: str | None = None  # external JSON-lines, keyed by image_id

    def __post_init__(self):
        if int(self.stride) != self.stride or self.stride < 1:
            raise ValueError(f"detector stride must be a positive integer, got {self.stride!r}")
        if not 0.0 <= float(self.score_floor) <= 1.0:
            raise ValueError(f"detector score_floor must be in [0, 1], got {self.score_floor!r}")


@dataclass(frozen=True)
class PruneConfig:
    enabled: bool = True
    coverage_floor: float = 0.05

    def __post_init__(self):
        if not 0.0 <= float(self.coverage_floor) <= 1.0:
            raise ValueError(f"coverage_floor must be in [0, 1], got {self.coverage_floor!r}")


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple = DEFAULT_THRESHOLDS
    coco_average: bool = False

    def __post_init__(self):
        ts = tuple(float(t) for t in self.thresholds)
        if not ts or any(not 0.0 < t <= 1.0 for t in ts):
            raise ValueError(f"IoU thresholds must lie in (0, 1], got {self.thresholds!r}")
        object.__setattr__(self, "thresholds", ts)


@dataclass(frozen=True)
class IoConfig:
    manifest: str | None = None
    ground_truth: str | None = None
    checkpoint: str | None = None
    out_dir: str | None = None
    split: str = "test"


@dataclass(frozen=True)
class PipelineConfig:
    morphology: StructuringElement = StructuringElement()
    invert: bool = False
    smoothgrad: SmoothGradConfig = SmoothGradConfig()
    proposals: ProposalConfig = ProposalConfig()
    nms: NmsConfig = NmsConfig()
    detector: DetectorConfig = DetectorConfig()
    prune: PruneConfig = PruneConfig()
    eval: EvalConfig = EvalConfig()
    io: IoConfig = IoConfig()
    no_saliency: bool = False

    _SECTIONS = ("morphology", "smoothgrad", "proposals", "nms", "detector", "prune", "eval", "io")

    def to_flat(self) -> dict:
        """Flat ``section.key`` view, the format of config files and provenance."""
        out = {}
        for sec in self._SECTIONS:
            for k, v in asdict(getattr(self, sec)).items():
                out[f"{sec}.{k}"] = list(v) if isinstance(v, tuple) else v
        out["morphology.invert"] = self.invert
        out["run.no_saliency"] = self.no_saliency
        return out

    @classmethod
    def from_flat(cls, flat: dict, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        """Apply flat dotted keys on top of ``base`` (defaults when omitted)."""
        cfg = base or cls()
        updates = {}
        top = {}
        for key, value in flat.items():
            if key == "morphology.invert":
                top["invert"] = bool(value)
                continue
            if key == "run.no_saliency":
                top["no_saliency"] = bool(value)
                continue
            sec, _, name = key.partition(".")
            if sec not in cls._SECTIONS or not name:
                raise ValueError(f"unknown config key {key!r}")
            names = {f.name for f in fields(getattr(cfg, sec))}
            if name not in names:
                raise ValueError(f"unknown config key {key!r}")
            if isinstance(value, list):
                value = tuple(value)
            updates.setdefault(sec, {})[name] = value
        for sec, kv in updates.items():
            top[sec] = replace(getattr(cfg, sec), **kv)
        return replace(cfg, **top)


def load_config_file(path) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object of dotted keys")
    return data


def thread_count() -> int:
    """Worker cap from ``SALDET_THREADS`` (default: CPU count)."""
    raw = os.environ.get("SALDET_THREADS", "").strip()
    if raw:
        n = int(raw)
        if n < 1:
            raise ValueError("SALDET_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# training data
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class PatchSamplingConfig:
    """How training patches are cut from annotated images.

    Defect patches are centred on each ground-truth box with a random shift
    of up to ``jitter`` px and labelled with the box's highest class id (the
    most specific one for co-occurring labels). Background patches avoid
    every annotated box; ``partial_negatives`` further background patches
    per box overlap it with IoU below ``negative_iou``, so that off-centre
    views of a defect, which a window-sized detector box cannot localize,
    are not rewarded. With probability ``brightness_aug`` a defect patch
    gets the in-box brightness boost that the pipeline applies to salient
    regions, using the padded ground-truth box as a stand-in for the
    proposal; background patches get a random boosted box with probability
    ``background_aug`` (false proposals). The classifier thus sees both raw
    and enhanced appearances, and learns that a boosted region is more
    likely to hold a defect.
    """

    defect_copies: int = 3
    background_per_image: int = 2
    partial_negatives: int = 5
    negative_iou: float = 0.3
    jitter: int = 8
    brightness_aug: float = 0.7
    background_aug: float = 0.5
    gain: float = 1.25
    seed: int = 0


def _crop_origin(cy: float, cx: float, H: int, W: int) -> tuple:
    y = int(round(cy - PATCH / 2))
    x = int(round(cx - PATCH / 2))
    return min(max(y, 0), H - PATCH), min(max(x, 0), W - PATCH)


def _overlaps(y: int, x: int, boxes: list) -> bool:
    return any(not (x + PATCH <= b.x or b.x2 <= x or y + PATCH <= b.y or b.y2 <= y) for b in boxes)


def _augment(px: np.ndarray, box: BBox | None, rng: np.random.Generator, gain: float) -> np.ndarray:
    """Brighten a box inside a 64x64 uint8 patch (random box when ``box`` is None)."""
    if box is None:
        w = int(rng.integers(16, PATCH + 1))
        h = int(rng.integers(16, PATCH + 1))
        box = BBox(int(rng.integers(0, PATCH - w + 1)), int(rng.integers(0, PATCH - h + 1)), w, h)
    return enhance(Image(px), [box], gain).pixels


def training_patches(manifest, gts: list, cfg: PatchSamplingConfig = PatchSamplingConfig(),
                     split: str = "train", images: dict | None = None) -> list:
    """``(patch in [0, 1], label)`` pairs from every image of ``split``.

    ``images`` maps image ids to replacement images (e.g. enhanced copies);
    other ids are read from disk.
    """
    by_image = {}
    for g in gts:
        by_image.setdefault(g.image_id, []).append(g)
    out = []
    for idx, entry in enumerate(manifest.split(split)):
        rng = np.random.default_rng((cfg.seed, idx))
        src = images.get(entry.image_id) if images else None
        if src is None:
            src = load_image(manifest.resolve(entry))
        gray = to_grayscale(src).pixels
        H, W = gray.shape
        if H < PATCH or W < PATCH:
            continue
        boxes = by_image.get(entry.image_id, [])
        for g in boxes:
            b = g.bbox
            for _ in range(cfg.defect_copies):
                dy, dx = rng.integers(-cfg.jitter, cfg.jitter + 1, size=2)
                y, x = _crop_origin(b.y + b.h / 2 + dy, b.x + b.w / 2 + dx, H, W)
                px = gray[y:y + PATCH, x:x + PATCH]
                if rng.random() < cfg.brightness_aug:
                    pad = int(rng.integers(2, 9))
                    x0, y0 = max(b.x - pad - x, 0), max(b.y - pad - y, 0)
                    x1, y1 = min(b.x2 + pad - x, PATCH), min(b.y2 + pad - y, PATCH)
                    box = BBox(x0, y0, x1 - x0, y1 - y0) if x1 > x0 and y1 > y0 else None
                    px = _augment(px, box, rng, cfg.gain)
                out.append((px.astype(np.float64) / 255.0, max(g.labels)))
            for _ in range(cfg.partial_negatives):
                for _attempt in range(50):
                    y = min(max(b.y + b.h // 2 - PATCH // 2 + int(rng.integers(-48, 49)), 0), H - PATCH)
                    x = min(max(b.x + b.w // 2 - PATCH // 2 + int(rng.integers(-48, 49)), 0), W - PATCH)
                    win = BBox(x, y, PATCH, PATCH)
                    if _overlaps(y, x, [b]) and max(iou(win, o.bbox) for o in boxes) < cfg.negative_iou:
                        px = gray[y:y + PATCH, x:x + PATCH]
                        if rng.random() < cfg.background_aug:
                            px = _augment(px, None, rng, cfg.gain)
                        out.append((px.astype(np.float64) / 255.0, 0))
                        break
        gboxes = [g.bbox for g in boxes]
        for _ in range(cfg.background_per_image):
            for _attempt in range(50):
                y = int(rng.integers(0, H - PATCH + 1))
                x = int(rng.integers(0, W - PATCH + 1))
                if not _overlaps(y, x, gboxes):
                    px = gray[y:y + PATCH, x:x + PATCH]
                    if rng.random() < cfg.background_aug:
                        px = _augment(px, None, rng, cfg.gain)
                    out.append((px.astype(np.float64) / 255.0, 0))
                    break
    return out


@dataclass(frozen=True)
class TrainConfig:
    """Reference-classifier training.

    With ``on_enhanced`` a first classifier trained on raw patches drives
    the saliency stage over the training split; the final classifier is
    then trained from scratch on raw plus enhanced-image patches.
    """

    epochs: int = 15
    lr: float = 0.02
    batch_size: int = 8
    seed: int = 0
    on_enhanced: bool = False

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ValueError(f"epochs must be an integer >= 1, got {self.epochs!r}")
        if not float(self.lr) >= 0.0:
            raise ValueError(f"lr must be >= 0, got {self.lr!r}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ValueError(f"batch_size must be an integer >= 1, got {self.batch_size!r}")


def enhance_split(manifest, clf: PatchClassifier, cfg: PipelineConfig, split: str = "train") -> dict:
    """Enhanced copy of every image in ``split``, keyed by image id."""
    return {e.image_id: saliency_stage(load_image(manifest.resolve(e)), clf, cfg)[2]
            for e in manifest.split(split)}


def train_reference(manifest, gts: list, sampling: PatchSamplingConfig = PatchSamplingConfig(),
                    tcfg: TrainConfig = TrainConfig(), pipeline_cfg: PipelineConfig | None = None) -> tuple:
    """Train the patch classifier on the training split; returns ``(clf, loss_trace)``."""
    pts = training_patches(manifest, gts, sampling)
    clf, trace = train(PatchClassifier.initialize(tcfg.seed), pts, tcfg.epochs, tcfg.lr,
                       tcfg.seed, tcfg.batch_size)
    if tcfg.on_enhanced:
        enhanced = enhance_split(manifest, clf, pipeline_cfg or PipelineConfig())
        extra = training_patches(manifest, gts, replace(sampling, seed=sampling.seed + 1),
                                 images=enhanced)
        clf, more = train(PatchClassifier.initialize(tcfg.seed), pts + extra, tcfg.epochs,
                          tcfg.lr, tcfg.seed, tcfg.batch_size)
        trace = list(trace) + list(more)
    return clf, trace


# ---------------------------------------------------------------------------
# per-image pipeline
# ---------------------------------------------------------------------------
@dataclass
class ImageResult:
    image_id: str
    enhanced: Image | None = None
    fused: FusedMap | None = None
    boxes: list = field(default_factory=list)
    box_scores: list = field(default_factory=list)
    detections: list = field(default_factory=list)
    error: str | None = None


def saliency_stage(img: Image, clf: PatchClassifier, cfg: PipelineConfig) -> tuple:
    """Fused map, proposed boxes and enhanced image for one input image."""
    gray = to_grayscale(img)
    work = Image(255 - gray.pixels) if cfg.invert else gray
    sal = image_saliency(clf, work, cfg.smoothgrad)
    lin = linearity_map(work, cfg.morphology)
    prov = {"se_shape": cfg.morphology.shape, "se_radius": cfg.morphology.radius,
            "smoothgrad": asdict(cfg.smoothgrad), "invert": cfg.invert}
    fused = fuse_maps(sal, lin, prov)
    boxes = propose_boxes(fused, cfg.proposals)
    enhanced = enhance(img, boxes, cfg.proposals.brightness_gain)
    return fused, boxes, enhanced


def process_image(img: Image, image_id: str, clf: PatchClassifier, cfg: PipelineConfig,
                  external: list | None = None) -> ImageResult:
    """Run every stage on one image.

    With ``cfg.no_saliency`` the detector sees the raw image and the stages
    that depend on the fused map (proposals, enhancement, pruning) are
    skipped. ``external`` supplies precomputed detections instead of the
    reference detector.
    """
    res = ImageResult(image_id)
    fused = None
    if cfg.no_saliency:
        det_input = img
    else:
        fused, res.boxes, det_input = saliency_stage(img, clf, cfg)
        res.fused = fused
        res.enhanced = det_input
        res.box_scores = [box_score(fused, b) for b in res.boxes]
    if external is None:
        dets = detect_reference(det_input, clf, cfg.detector.stride, cfg.detector.score_floor,
                                image_id, cfg.nms)
    else:
        dets = nms_per_class(external, cfg.nms)
    if fused is not None and cfg.prune.enabled:
        dets = prune_by_saliency(dets, fused, cfg.prune.coverage_floor)
    res.detections = dets
    return res


# ---------------------------------------------------------------------------
# provenance
# ---------------------------------------------------------------------------
def file_digest(path) -> str | None:
    if path is None or not Path(path).exists():
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def provenance(cfg: PipelineConfig) -> dict:
    io = cfg.io
    return {
        "package": "saldet",
        "version": __version__,
        "config": cfg.to_flat(),
        "inputs": {
            "manifest_sha256": file_digest(io.manifest),
            "ground_truth_sha256": file_digest(io.ground_truth),
            "checkpoint_sha256": file_digest(io.checkpoint),
            "checkpoint_index_sha256": file_digest(None if io.checkpoint is None else str(io.checkpoint) + ".json"),
            "detections_sha256": file_digest(cfg.detector.detections),
        },
    }


# ---------------------------------------------------------------------------
# cmd_pipeline
# ---------------------------------------------------------------------------
def _write_image_outputs(res: ImageResult, out: Path, like: Image) -> None:
    if res.enhanced is not None:
        ext = "pgm" if like.channels == 1 else "ppm"
        save_image(res.enhanced, out / "enhanced" / f"{res.image_id}.{ext}")
    if res.fused is not None:
        save_floatmap(res.fused.map, out / "fused" / f"{res.image_id}.f32")
        save_floatmap_pgm(res.fused.map, out / "fused" / f"{res.image_id}.pgm")


def cmd_pipeline(cfg: PipelineConfig, clf: PatchClassifier | None = None) -> dict:
    """Process every image of the configured split and evaluate.

    Writes ``enhanced/``, ``fused/``, ``boxes.jsonl``, ``detections.jsonl``,
    ``report.json``, ``report.txt``, ``pr_curves.csv`` and ``provenance.json``
    under the output directory. A failing image is logged, listed in the
    report and left out of the evaluation. Returns the report dictionary.
    """
    io = cfg.io
    if io.manifest is None or io.out_dir is None:
        raise ValueError("pipeline needs io.manifest and io.out_dir")
    manifest = load_manifest(io.manifest, check_paths=False)
    entries = manifest.split(io.split)
    gts_all = load_ground_truth(io.ground_truth) if io.ground_truth else []
    if clf is None:
        if io.checkpoint is None and cfg.detector.detections is None:
            raise ValueError("pipeline needs io.checkpoint (or detector.detections)")
        clf = load_checkpoint(io.checkpoint) if io.checkpoint else None
    if clf is None and not cfg.no_saliency:
        raise ValueError("saliency stages need a classifier checkpoint")
    external = None
    if cfg.detector.detections is not None:
        external = {}
        for d in load_detections(cfg.detector.detections):
            external.setdefault(d.image_id, []).append(d)
    if clf is not None:
        clf.layouts()

    out = Path(io.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not cfg.no_saliency:
        (out / "enhanced").mkdir(exist_ok=True)
        (out / "fused").mkdir(exist_ok=True)
    if not entries:
        log.warning("split %r of %s is empty", io.split, io.manifest)

    def work(entry):
        try:
            img = load_image(manifest.resolve(entry))
            ext = None if external is None else external.get(entry.image_id, [])
            res = process_image(img, entry.image_id, clf, cfg, ext)
            _write_image_outputs(res, out, img)
            return res
        except Exception as exc:  # isolate per-image failures
            log.error("image %s failed: %s", entry.image_id, exc)
            return ImageResult(entry.image_id, error=f"{type(exc).__name__}: {exc}")

    workers = min(thread_count(), max(len(entries), 1))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, entries))
    else:
        results = [work(e) for e in entries]

    ok_ids = {r.image_id for r in results if r.error is None}
    failed = [{"image_id": r.image_id, "error": r.error} for r in results if r.error is not None]
    dets = [d for r in results if r.error is None for d in r.detections]
    gts = [g for g in gts_all if g.image_id in ok_ids]
    report = evaluate(dets, gts, cfg.eval.thresholds, cfg.eval.coco_average,
                      config={"nms": asdict(cfg.nms), "detector_stride": cfg.detector.stride,
                              "detector_score_floor": cfg.detector.score_floor,
                              "saliency": not cfg.no_saliency, "split": io.split})
    if not entries:
        report.warnings.append(f"split {io.split!r} is empty")
    rd = report.to_dict()
    rd["images"] = {"processed": len(ok_ids), "failed": len(failed)}
    rd["failures"] = failed

    atomic_write_text(out / "boxes.jsonl", "".join(
        json.dumps({"image_id": r.image_id, "bbox": b.as_list(), "score": s}) + "\n"
        for r in results if r.error is None for b, s in zip(r.boxes, r.box_scores)))
    atomic_write_text(out / "detections.jsonl", "".join(detection_to_json(d) + "\n" for d in dets))
    atomic_write_text(out / "report.json", json.dumps(rd, indent=2, sort_keys=True) + "\n")
    save_report(report, out / "report_metrics.json", out / "report.txt", out / "pr_curves.csv")
    atomic_write_text(out / "provenance.json", json.dumps(provenance(cfg), indent=2, sort_keys=True) + "\n")
    return rd


__all__ = [
    "DetectorConfig", "PruneConfig", "EvalConfig", "IoConfig", "PipelineConfig",
    "PatchSamplingConfig", "TrainConfig", "enhance_split", "train_reference", "ImageResult", "training_patches", "saliency_stage", "process_image",
    "provenance", "cmd_pipeline", "load_config_file", "thread_count", "Detection",
]
