"""Command-line interface: ``saldet <subcommand> ...``.

Exit codes are 0 (success), 1 (input error: bad arguments, missing or
malformed files, invalid configuration) and 2 (internal error). Failures
print a single JSON line ``{"error": ..., "exit_code": ..., "message": ...}``
on stderr.

Every subcommand accepts ``--config FILE``, a JSON object with flat dotted
keys. Keys under ``synth.``, ``train.`` and ``sampling.`` configure data
generation and classifier training; all other keys are pipeline settings
(``smoothgrad.n_samples``, ``proposals.threshold``, ``io.out_dir``, ...).
Explicit flags override the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .detect import detect_reference, load_detections, nms_per_class, save_detections
from .evaluation import evaluate, save_report
from .imgio import (BBox, FormatError, Image, atomic_write_text, load_ground_truth, load_image, load_manifest,
                    save_image, to_grayscale)
from .morphology import linearity_map, load_floatmap, save_floatmap, save_floatmap_pgm
from .pipeline import (PatchSamplingConfig, PipelineConfig, TrainConfig, cmd_pipeline, load_config_file,
                       train_reference)
from .proposals import box_score, enhance, fuse_maps, propose_boxes
from .saliency import image_saliency, load_checkpoint, save_checkpoint, save_loss_trace
from .synth import SynthConfig, cmd_synth

log = logging.getLogger("saldet")

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2
_OWN_SECTIONS = ("synth", "train", "sampling")


class UsageError(Exception):
    """Bad command-line usage (reported with exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------
def _read_config(args) -> dict:
    return load_config_file(args.config) if getattr(args, "config", None) else {}


def _section(flat: dict, name: str, cls) -> dict:
    """``name.*`` keys of ``flat`` as keyword arguments for dataclass ``cls``."""
    names = {f.name for f in fields(cls)}
    out = {}
    for key, value in flat.items():
        sec, _, field_name = key.partition(".")
        if sec != name:
            continue
        if field_name not in names:
            raise ValueError(f"unknown config key {key!r}")
        out[field_name] = tuple(value) if isinstance(value, list) else value
    return out


def _pipeline_flat(flat: dict) -> dict:
    return {k: v for k, v in flat.items() if k.partition(".")[0] not in _OWN_SECTIONS}


def _overrides(args, mapping: dict) -> dict:
    """Flat keys for every flag in ``mapping`` (attr -> key) that was given."""
    out = {}
    for attr, key in mapping.items():
        v = getattr(args, attr, None)
        if v is not None and v is not False:
            out[key] = v
    return out


def _pipeline_config(args, mapping: dict) -> PipelineConfig:
    flat = _pipeline_flat(_read_config(args))
    flat.update(_overrides(args, mapping))
    return PipelineConfig.from_flat(flat)


def _parse_threshold(v: str):
    if v == "otsu":
        return v
    try:
        return float(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'otsu' or a number, got {v!r}") from None


def _float_list(v: str) -> list:
    try:
        return [float(t) for t in v.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {v!r}") from None


def _image_id(path, given) -> str:
    return given if given else Path(path).stem


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------
def run_synth(args) -> int:
    flat = _read_config(args)
    kw = _section(flat, "synth", SynthConfig)
    if "counts" in kw:
        kw["counts"] = {int(k): int(n) for k, n in dict(kw["counts"]).items()}
    for attr in ("seed", "count_per_class", "size"):
        if getattr(args, attr) is not None:
            kw[attr] = getattr(args, attr)
    man = cmd_synth(SynthConfig(**kw), args.out)
    print(json.dumps({"images": len(man.entries), "splits": man.split_counts(), "out": str(args.out)}))
    return EXIT_OK


def run_train(args) -> int:
    flat = _read_config(args)
    sampling = PatchSamplingConfig(**_section(flat, "sampling", PatchSamplingConfig))
    tkw = _section(flat, "train", TrainConfig)
    tkw.update(_overrides(args, {"epochs": "epochs", "lr": "lr", "batch_size": "batch_size",
                                 "seed": "seed", "train_on_enhanced": "on_enhanced"}))
    tcfg = TrainConfig(**tkw)
    pcfg = PipelineConfig.from_flat(_pipeline_flat(flat))
    man = load_manifest(args.manifest)
    gts = load_ground_truth(args.ground_truth)
    clf, trace = train_reference(man, gts, sampling, tcfg, pcfg)
    save_checkpoint(clf, args.out)
    if args.loss_trace:
        save_loss_trace(trace, args.loss_trace)
    print(json.dumps({"checkpoint": str(args.out), "epochs": len(trace), "final_loss": trace[-1]}))
    return EXIT_OK


def run_saliency(args) -> int:
    cfg = _pipeline_config(args, {"n_samples": "smoothgrad.n_samples", "sigma": "smoothgrad.sigma",
                                  "seed": "smoothgrad.rng_seed", "invert": "morphology.invert"})
    img = load_image(args.image)
    gray = to_grayscale(img)
    work = Image(255 - gray.pixels) if cfg.invert else gray
    clf = load_checkpoint(args.checkpoint)
    sal = image_saliency(clf, work, cfg.smoothgrad)
    out_map = fuse_maps(sal, linearity_map(work, cfg.morphology)).map if args.fused else sal
    base = str(args.out)
    save_floatmap(out_map, base + ".f32")
    save_floatmap_pgm(out_map, base + ".pgm")
    print(json.dumps({"float": base + ".f32", "pgm": base + ".pgm",
                      "height": out_map.height, "width": out_map.width}))
    return EXIT_OK


def run_propose(args) -> int:
    cfg = _pipeline_config(args, {"threshold": "proposals.threshold", "min_area": "proposals.min_area",
                                  "pad": "proposals.pad", "merge_iou": "proposals.merge_iou"})
    fused = load_floatmap(args.fused)
    if fused.values.min() < 0.0 or fused.values.max() > 1.0:
        raise ValueError(f"{args.fused}: fused map values must lie in [0, 1]")
    boxes = propose_boxes(fused, cfg.proposals)
    image_id = _image_id(args.fused, args.image_id)
    atomic_write_text(args.out, "".join(
        json.dumps({"image_id": image_id, "bbox": b.as_list(), "score": box_score(fused, b)}) + "\n"
        for b in boxes))
    print(json.dumps({"boxes": len(boxes), "out": str(args.out)}))
    return EXIT_OK


def _load_boxes(path, image_id) -> list:
    boxes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict) or "bbox" not in obj:
                    raise ValueError("missing field 'bbox'")
                if image_id is not None and obj.get("image_id") not in (None, image_id):
                    continue
                boxes.append(BBox.from_list(obj["bbox"]))
            except (ValueError, TypeError) as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
    return boxes


def run_enhance(args) -> int:
    cfg = _pipeline_config(args, {"gain": "proposals.brightness_gain"})
    img = load_image(args.image)
    boxes = _load_boxes(args.boxes, args.image_id)
    save_image(enhance(img, boxes, cfg.proposals.brightness_gain), args.out)
    print(json.dumps({"boxes": len(boxes), "out": str(args.out)}))
    return EXIT_OK


def run_detect_ref(args) -> int:
    cfg = _pipeline_config(args, {"stride": "detector.stride", "score_floor": "detector.score_floor",
                                  "iou_threshold": "nms.iou_threshold", "nms_floor": "nms.score_floor"})
    img = load_image(args.image)
    clf = load_checkpoint(args.checkpoint)
    dets = detect_reference(img, clf, cfg.detector.stride, cfg.detector.score_floor,
                            _image_id(args.image, args.image_id), cfg.nms)
    save_detections(dets, args.out)
    print(json.dumps({"detections": len(dets), "out": str(args.out)}))
    return EXIT_OK


def run_nms(args) -> int:
    cfg = _pipeline_config(args, {"iou_threshold": "nms.iou_threshold", "score_floor": "nms.score_floor"})
    dets = load_detections(args.detections)
    kept = nms_per_class(dets, cfg.nms)
    save_detections(kept, args.out)
    print(json.dumps({"input": len(dets), "kept": len(kept), "out": str(args.out)}))
    return EXIT_OK


def run_eval(args) -> int:
    cfg = _pipeline_config(args, {"thresholds": "eval.thresholds", "coco_average": "eval.coco_average"})
    dets = load_detections(args.detections)
    gts = load_ground_truth(args.ground_truth)
    report = evaluate(dets, gts, cfg.eval.thresholds, cfg.eval.coco_average)
    save_report(report, args.out, args.table, args.curves)
    sys.stdout.write(report.table())
    return EXIT_OK


def run_pipeline(args) -> int:
    cfg = _pipeline_config(args, {
        "manifest": "io.manifest", "ground_truth": "io.ground_truth", "checkpoint": "io.checkpoint",
        "out": "io.out_dir", "split": "io.split", "detections": "detector.detections",
        "no_saliency": "run.no_saliency", "invert": "morphology.invert",
        "coco_average": "eval.coco_average", "n_samples": "smoothgrad.n_samples",
        "threshold": "proposals.threshold", "stride": "detector.stride",
        "score_floor": "detector.score_floor",
    })
    if cfg.io.manifest is not None:
        load_manifest(cfg.io.manifest)  # surface missing files as input errors up front
    rd = cmd_pipeline(cfg)
    summary = {"out": cfg.io.out_dir, "images": rd["images"], "map": rd["map"],
               "recall": {k: v["all"] for k, v in rd["recall"].items()}}
    if rd.get("warnings"):
        summary["warnings"] = rd["warnings"]
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="saldet", description="Saliency-guided defect detection toolkit.")
    p.add_argument("--version", action="version", version=f"saldet {__version__}")
    p.add_argument("--log-level", default="WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def cmd(name, func, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="JSON file of flat dotted keys (flags win)")
        sp.set_defaults(func=func)
        return sp

    sp = cmd("synth", run_synth, "Generate a seeded synthetic defect dataset.")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--count-per-class", type=int)
    sp.add_argument("--size", type=int)

    sp = cmd("train", run_train, "Train the reference patch classifier.")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--ground-truth", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path (index written to PATH.json)")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--train-on-enhanced", action="store_true",
                    help="add patches from saliency-enhanced training images")
    sp.add_argument("--loss-trace", help="CSV of per-epoch mean loss")

    sp = cmd("saliency", run_saliency, "SmoothGrad saliency map of one image.")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True, help="output prefix; writes PREFIX.f32 and PREFIX.pgm")
    sp.add_argument("--fused", action="store_true", help="emit the fused saliency/linearity map")
    sp.add_argument("--n-samples", type=int)
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--invert", action="store_true", help="treat bright structures as defects")

    sp = cmd("propose", run_propose, "Region proposals from a fused map.")
    sp.add_argument("--fused", required=True, help="fused map (.f32)")
    sp.add_argument("--out", required=True, help="boxes JSON-lines")
    sp.add_argument("--image-id")
    sp.add_argument("--threshold", type=_parse_threshold)
    sp.add_argument("--min-area", type=int)
    sp.add_argument("--pad", type=int)
    sp.add_argument("--merge-iou", type=float)

    sp = cmd("enhance", run_enhance, "Brighten an image inside proposal boxes.")
    sp.add_argument("--image", required=True)
    sp.add_argument("--boxes", required=True, help="boxes JSON-lines")
    sp.add_argument("--out", required=True)
    sp.add_argument("--image-id", help="only use boxes with this image_id")
    sp.add_argument("--gain", type=float)

    sp = cmd("detect-ref", run_detect_ref, "Sliding-window reference detector on one image.")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True, help="detections JSON-lines")
    sp.add_argument("--image-id")
    sp.add_argument("--stride", type=int)
    sp.add_argument("--score-floor", type=float)
    sp.add_argument("--iou-threshold", type=float)
    sp.add_argument("--nms-floor", type=float)

    sp = cmd("nms", run_nms, "Per-class non-maximum suppression of a detection file.")
    sp.add_argument("--detections", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iou-threshold", type=float)
    sp.add_argument("--score-floor", type=float)

    sp = cmd("eval", run_eval, "Evaluate detections against ground truth.")
    sp.add_argument("--detections", required=True)
    sp.add_argument("--ground-truth", required=True)
    sp.add_argument("--out", required=True, help="report JSON")
    sp.add_argument("--table", help="plain-text table")
    sp.add_argument("--curves", help="precision/recall CSV")
    sp.add_argument("--thresholds", type=_float_list, help="comma-separated IoU thresholds")
    sp.add_argument("--coco-average", action="store_true", help="also report mAP@0.5:0.95")

    sp = cmd("pipeline", run_pipeline, "Full pipeline and evaluation over a dataset split.")
    sp.add_argument("--manifest")
    sp.add_argument("--ground-truth")
    sp.add_argument("--checkpoint")
    sp.add_argument("--out")
    sp.add_argument("--split")
    sp.add_argument("--detections", help="external detections JSON-lines (skips the reference detector)")
    sp.add_argument("--no-saliency", action="store_true", help="detector sees the raw images")
    sp.add_argument("--invert", action="store_true")
    sp.add_argument("--coco-average", action="store_true")
    sp.add_argument("--n-samples", type=int)
    sp.add_argument("--threshold", type=_parse_threshold)
    sp.add_argument("--stride", type=int)
    sp.add_argument("--score-floor", type=float)
    return p


def _fail(code: int, exc: BaseException) -> int:
    msg = str(exc).replace("\n", " ")
    if isinstance(exc, (FileNotFoundError, PermissionError, IsADirectoryError)) and exc.filename:
        msg = f"{exc.strerror}: {exc.filename}"
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "exit_code": code, "message": msg}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_INPUT, exc)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FormatError, ValueError, KeyError, OSError, json.JSONDecodeError,
            argparse.ArgumentTypeError) as exc:
        return _fail(EXIT_INPUT, exc)
    except Exception as exc:  # anything else is a bug
        log.debug("internal error", exc_info=True)
        return _fail(EXIT_INTERNAL, exc)


if __name__ == "__main__":
    sys.exit(main())
