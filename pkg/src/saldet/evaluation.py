"""Detection metrics: matching, precision/recall, AP and mAP reports."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .imgio import CLASS_NAMES, DEFECT_CLASSES, atomic_write_text, iou

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.5, 0.75, 0.95)
COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class MatchResult:
    """Outcome of matching one class at one IoU threshold.

    ``scores`` and ``is_tp`` are aligned and ordered by decreasing score.
    """

    cls: int
    threshold: float
    scores: list = field(default_factory=list)
    is_tp: list = field(default_factory=list)
    n_gt: int = 0

    @property
    def tp(self) -> int:
        return int(sum(self.is_tp))

    @property
    def fp(self) -> int:
        return len(self.is_tp) - self.tp

    @property
    def fn(self) -> int:
        return self.n_gt - self.tp


def match_detections(dets: list, gts: list, t: float, c: int) -> MatchResult:
    """Greedy single-assignment matching of class ``c`` at IoU threshold ``t``.

    Detections with a positive class-``c`` score are taken by decreasing
    score (input order breaks ties). Each one claims the unmatched
    same-image ground-truth box labelled ``c`` with the highest IoU (earliest
    box on ties); it is a true positive when that IoU is at least ``t``.
    """
    gt_by_image = {}
    n_gt = 0
    for g in gts:
        if c in g.labels:
            gt_by_image.setdefault(g.image_id, []).append(g.bbox)
            n_gt += 1
    cand = [i for i, d in enumerate(dets) if d.score(c) > 0.0]
    cand.sort(key=lambda i: -dets[i].score(c))
    taken = {k: [False] * len(v) for k, v in gt_by_image.items()}
    res = MatchResult(c, t, n_gt=n_gt)
    for i in cand:
        d = dets[i]
        boxes = gt_by_image.get(d.image_id, [])
        used = taken.get(d.image_id, [])
        best = -1
        best_iou = -1.0
        for j, b in enumerate(boxes):
            if used[j]:
                continue
            v = iou(d.bbox, b)
            if v > best_iou:
                best, best_iou = j, v
        hit = best >= 0 and best_iou >= t
        if hit:
            used[best] = True
        res.scores.append(d.score(c))
        res.is_tp.append(hit)
    return res


def precision_recall(m: MatchResult) -> tuple:
    """Final precision and recall; no detections gives precision 1, no ground truth recall 0."""
    tp, fp, fn = m.tp, m.fp, m.fn
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


def pr_curve(m: MatchResult) -> tuple:
    """Recall and precision after each detection in score order."""
    if m.n_gt == 0:
        return np.zeros(0), np.zeros(0)
    hits = np.asarray(m.is_tp, dtype=np.float64)
    tp = np.cumsum(hits)
    k = np.arange(1, len(hits) + 1, dtype=np.float64)
    return tp / m.n_gt, tp / k


def average_precision(m: MatchResult):
    """All-points interpolated AP, or ``None`` when the class has no ground truth.

    Every precision is replaced by the largest precision at equal or higher
    recall, and AP sums ``(r_i - r_{i-1}) * envelope_i`` over the sweep.
    """
    if m.n_gt == 0:
        return None
    recall, precision = pr_curve(m)
    if len(recall) == 0:
        return 0.0
    env = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate(([0.0], recall)))
    return float(np.sum(steps * env))


def mean_ap(aps) -> float:
    """Arithmetic mean of the defined per-class APs (``None`` entries are skipped)."""
    vals = list(aps.values()) if isinstance(aps, dict) else list(aps)
    defined = [float(v) for v in vals if v is not None]
    if not defined:
        raise ValueError("no class has a defined AP")
    return sum(defined) / len(defined)


@dataclass
class EvalReport:
    thresholds: list
    ap: dict
    map: dict
    precision: dict
    recall: dict
    counts: dict
    curves: dict
    config: dict = field(default_factory=dict)
    map_coco: float | None = None
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "thresholds": self.thresholds,
            "ap": self.ap,
            "map": self.map,
            "precision": self.precision,
            "recall": self.recall,
            "counts": self.counts,
            "config": self.config,
            "warnings": self.warnings,
        }
        if self.map_coco is not None or self.config.get("coco_average"):
            d["map_coco"] = self.map_coco
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        """Plain-text table: one row per class, one AP column per threshold."""
        keys = [_tkey(t) for t in self.thresholds]
        head = f"{'class':<16}" + "".join(f"{'AP@' + k:>10}" for k in keys)
        lines = [head, "-" * len(head)]
        for c in DEFECT_CLASSES:
            row = f"{CLASS_NAMES[c]:<16}"
            for k in keys:
                v = self.ap[k][CLASS_NAMES[c]]
                row += f"{'n/a' if v is None else f'{v:.4f}':>10}"
            lines.append(row)
        lines.append("-" * len(head))
        row = f"{'mAP':<16}"
        for k in keys:
            v = self.map[k]
            row += f"{'n/a' if v is None else f'{v:.4f}':>10}"
        lines.append(row)
        if self.map_coco is not None:
            lines.append(f"{'mAP@0.5:0.95':<16}{self.map_coco:>10.4f}")
        return "\n".join(lines) + "\n"

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "class", "recall", "precision"])
        for k in sorted(self.curves):
            for name in sorted(self.curves[k]):
                for r, p in self.curves[k][name]:
                    w.writerow([k, name, repr(r), repr(p)])
        return buf.getvalue()


def _tkey(t: float) -> str:
    return f"{float(t):g}"


def evaluate(dets: list, gts: list, thresholds=DEFAULT_THRESHOLDS, coco_average: bool = False,
             config: dict | None = None) -> EvalReport:
    """Per-class AP, mAP, precision and recall at every IoU threshold.

    Classes without ground truth have AP ``None`` and are left out of mAP;
    when no class has ground truth mAP is ``None`` as well.
    """
    thresholds = [float(t) for t in thresholds]
    ap, maps, prec, rec, counts, curves = {}, {}, {}, {}, {}, {}
    warnings = []
    for t in thresholds:
        k = _tkey(t)
        ap[k], prec[k], rec[k], counts[k], curves[k] = {}, {}, {}, {}, {}
        tp_all = 0
        gt_all = 0
        for c in DEFECT_CLASSES:
            name = CLASS_NAMES[c]
            m = match_detections(dets, gts, t, c)
            ap[k][name] = average_precision(m)
            p, r = precision_recall(m)
            prec[k][name] = p
            rec[k][name] = r
            counts[k][name] = {"tp": m.tp, "fp": m.fp, "fn": m.fn, "n_gt": m.n_gt}
            rr, pp = pr_curve(m)
            curves[k][name] = [(float(a), float(b)) for a, b in zip(rr, pp)]
            tp_all += m.tp
            gt_all += m.n_gt
        rec[k]["all"] = tp_all / gt_all if gt_all else 0.0
        if any(v is not None for v in ap[k].values()):
            maps[k] = mean_ap(ap[k])
        else:
            maps[k] = None
    missing = [CLASS_NAMES[c] for c in DEFECT_CLASSES
               if ap[_tkey(thresholds[0])][CLASS_NAMES[c]] is None] if thresholds else []
    if missing:
        msg = f"no ground truth for classes {missing}; excluded from mAP"
        warnings.append(msg)
        log.warning(msg)
    map_coco = None
    if coco_average:
        vals = []
        for t in COCO_THRESHOLDS:
            aps = {c: average_precision(match_detections(dets, gts, t, c)) for c in DEFECT_CLASSES}
            if any(v is not None for v in aps.values()):
                vals.append(mean_ap(aps))
        map_coco = sum(vals) / len(vals) if vals else None
    cfg = dict(config or {})
    cfg["thresholds"] = thresholds
    cfg["coco_average"] = bool(coco_average)
    return EvalReport(thresholds, ap, maps, prec, rec, counts, curves, cfg, map_coco, warnings)


def save_report(report: EvalReport, json_path, table_path=None, curves_path=None) -> None:
    atomic_write_text(json_path, report.to_json())
    if table_path is not None:
        atomic_write_text(table_path, report.table())
    if curves_path is not None:
        atomic_write_text(curves_path, report.curves_csv())


def load_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
