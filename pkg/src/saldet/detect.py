"""Multi-label detections, per-class NMS, the reference detector and pruning."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .imgio import BBox, FormatError, Image, atomic_write_text, iou, to_grayscale
from .proposals import _values, otsu_threshold, salient_mask
from .saliency.network import PATCH, PatchClassifier, softmax
from .saliency.smoothgrad import _TileEngine

N_DEFECT = 5

__all__ = [
    "Detection", "NmsConfig", "iou", "nms_per_class", "window_origins",
    "detect_reference", "prune_by_saliency", "load_detections", "save_detections",
    "detection_to_json",
]


def _unit_interval(name: str, v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float, np.floating, np.integer)):
        raise ValueError(f"{name} must be a number, got {v!r}")
    v = float(v)
    if not (0.0 <= v <= 1.0):
        raise ValueError(f"{name} must be in [0, 1], got {v!r}")
    return v


@dataclass(frozen=True)
class Detection:
    """Box with one confidence per defect class (crack .. corrosion stain)."""

    image_id: str
    bbox: BBox
    scores: tuple

    def __post_init__(self):
        s = tuple(self.scores)
        if len(s) != N_DEFECT:
            raise ValueError(f"scores must have {N_DEFECT} entries, got {len(s)}")
        s = tuple(_unit_interval("score", v) for v in s)
        if not any(v > 0.0 for v in s):
            raise ValueError("a detection needs at least one positive score")
        object.__setattr__(self, "scores", s)

    def score(self, c: int) -> float:
        """Score of defect class ``c`` (1..5)."""
        return self.scores[c - 1]


@dataclass(frozen=True)
class NmsConfig:
    iou_threshold: float = 0.45
    score_floor: float = 0.05

    def __post_init__(self):
        _unit_interval("iou_threshold", self.iou_threshold)
        _unit_interval("score_floor", self.score_floor)


def nms_per_class(dets: list, cfg: NmsConfig = NmsConfig()) -> list:
    """Greedy NMS run separately for every defect class and every image.

    For class ``c`` only detections with ``0 < score_c`` and
    ``score_c >= score_floor`` take part. They are visited by decreasing
    score (input order breaks ties); each kept box suppresses every later
    box of the same image with IoU above ``iou_threshold``. A detection
    that survives in any class is returned once, in input order, with the
    scores of the classes it did not survive in set to zero.
    """
    n = len(dets)
    kept = [[False] * N_DEFECT for _ in range(n)]
    by_image = {}
    for i, d in enumerate(dets):
        by_image.setdefault(d.image_id, []).append(i)
    for members in by_image.values():
        for k in range(N_DEFECT):
            cand = [i for i in members
                    if dets[i].scores[k] > 0.0 and dets[i].scores[k] >= cfg.score_floor]
            cand.sort(key=lambda i: -dets[i].scores[k])
            survivors = []
            for i in cand:
                b = dets[i].bbox
                if all(iou(dets[j].bbox, b) <= cfg.iou_threshold for j in survivors):
                    survivors.append(i)
                    kept[i][k] = True
    out = []
    for i, d in enumerate(dets):
        if any(kept[i]):
            scores = tuple(s if kept[i][k] else 0.0 for k, s in enumerate(d.scores))
            out.append(d if scores == d.scores else Detection(d.image_id, d.bbox, scores))
    return out


def window_origins(n: int, stride: int) -> list:
    """Window starts along one axis: every ``stride`` px plus one flush with the far edge."""
    if n < PATCH:
        raise ValueError(f"image dimension {n} is smaller than the {PATCH}-px window")
    starts = list(range(0, n - PATCH + 1, stride))
    if starts[-1] != n - PATCH:
        starts.append(n - PATCH)
    return starts


def detect_reference(img: Image, clf: PatchClassifier, stride: int = 32, score_floor: float = 0.5,
                     image_id: str = "", nms: NmsConfig = NmsConfig()) -> list:
    """Sliding-window detector: one 64x64 box per window that looks defective.

    A window is reported when its largest defect-class softmax probability
    reaches ``score_floor``; its scores are the five defect probabilities.
    The raw windows then go through ``nms_per_class``.
    """
    score_floor = _unit_interval("score_floor", score_floor)
    if isinstance(stride, bool) or int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride!r}")
    gray = to_grayscale(img)
    H, W = gray.height, gray.width
    tiles = np.array([(y, x) for y in window_origins(H, stride) for x in window_origins(W, stride)],
                     dtype=np.int64)
    eng = _TileEngine(clf, H, W, tiles)
    eng.load(gray.as_float())
    probs = softmax(eng.logits())[:, 1:]
    raw = []
    for (y, x), p in zip(tiles, probs):
        if p.max() >= score_floor and p.max() > 0.0:
            raw.append(Detection(image_id, BBox(int(x), int(y), PATCH, PATCH),
                                 tuple(float(v) for v in p)))
    return nms_per_class(raw, nms)


def prune_by_saliency(dets: list, fused, coverage_floor: float = 0.05, threshold=None) -> list:
    """Drop detections whose share of salient pixels is below ``coverage_floor``.

    A pixel is salient when its fused value exceeds the Otsu threshold of the
    map (or ``threshold`` when given).
    """
    coverage_floor = _unit_interval("coverage_floor", coverage_floor)
    v = _values(fused)
    H, W = v.shape
    t = otsu_threshold(v) if threshold is None else float(threshold)
    mask = salient_mask(v, t)
    out = []
    for d in dets:
        b = d.bbox
        if not b.fits(W, H):
            raise ValueError(f"detection box {b.as_list()} outside the {W}x{H} fused map")
        frac = mask[b.y:b.y2, b.x:b.x2].sum() / b.area
        if frac >= coverage_floor:
            out.append(d)
    return out


def detection_to_json(d: Detection) -> str:
    return json.dumps({"image_id": d.image_id, "bbox": d.bbox.as_list(),
                       "scores": list(d.scores)})


def save_detections(dets: list, path) -> None:
    atomic_write_text(path, "".join(detection_to_json(d) + "\n" for d in dets))


def load_detections(path) -> list:
    """Read JSON-lines detections, validating every record."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("expected a JSON object")
                for key in ("image_id", "bbox", "scores"):
                    if key not in obj:
                        raise ValueError(f"missing field {key!r}")
                scores = obj["scores"]
                if not isinstance(scores, list) or len(scores) != N_DEFECT:
                    raise ValueError(f"field 'scores' must be a list of {N_DEFECT} numbers")
                for v in scores:
                    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                        raise ValueError("field 'scores' must hold finite numbers")
                    if not 0.0 <= v <= 1.0:
                        raise ValueError(f"field 'scores' value {v} outside [0, 1]")
                out.append(Detection(str(obj["image_id"]), BBox.from_list(obj["bbox"]),
                                     tuple(float(v) for v in scores)))
            except (ValueError, TypeError) as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
    return out
