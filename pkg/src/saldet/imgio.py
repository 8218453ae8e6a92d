"""Images, boxes, annotations and dataset manifests.

Images are binary netpbm rasters (P5 grayscale, P6 RGB) with maxval 255.
Boxes use a top-left origin with ``y`` growing downward and are stored as
``(x, y, w, h)``.
"""
from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLASS_NAMES = (
    "background",
    "crack",
    "spallation",
    "exposed_bar",
    "efflorescence",
    "corrosion_stain",
)
N_CLASSES = len(CLASS_NAMES)
DEFECT_CLASSES = tuple(range(1, N_CLASSES))
SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    """Malformed or unsupported input file."""


@dataclass(frozen=True, eq=False)
class Image:
    """8-bit raster of shape (height, width) or (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            raise ValueError(f"pixels must be uint8, got {px.dtype}")
        if px.ndim == 3 and px.shape[2] == 1:
            px = px[:, :, 0]
        if px.ndim not in (2, 3) or (px.ndim == 3 and px.shape[2] != 3):
            raise ValueError(f"channels must be 1 or 3, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        px = np.ascontiguousarray(px)
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels))

    __hash__ = None

    def as_float(self) -> np.ndarray:
        """Single-channel pixels scaled to [0, 1] as float64."""
        if self.channels != 1:
            raise ValueError("as_float needs a single-channel image")
        return self.pixels.astype(np.float64) / 255.0


@dataclass(frozen=True)
class BBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v:
                raise ValueError(f"bbox.{name} must be an integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.w < 1 or self.h < 1:
            raise ValueError(f"bbox width/height must be >= 1, got {self.w}x{self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"bbox origin must be non-negative, got ({self.x}, {self.y})")

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    def fits(self, width: int, height: int) -> bool:
        return self.x2 <= width and self.y2 <= height

    def as_list(self) -> list:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_list(cls, v) -> "BBox":
        if not isinstance(v, (list, tuple)) or len(v) != 4:
            raise ValueError(f"bbox must be [x, y, w, h], got {v!r}")
        return cls(*v)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when they do not overlap."""
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: str
    bbox: BBox
    labels: tuple

    def __post_init__(self):
        labels = tuple(int(c) for c in self.labels)
        if not labels:
            raise ValueError("ground-truth labels must be non-empty")
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate labels {list(labels)}")
        for c in labels:
            if c == 0:
                raise ValueError("background label 0 not allowed in ground truth")
            if not 0 < c < N_CLASSES:
                raise ValueError(f"label {c} outside 1..{N_CLASSES - 1}")
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    path: str
    split: str


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    root: Path | None = None

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def split_counts(self) -> dict:
        counts = {s: 0 for s in SPLITS}
        for e in self.entries:
            counts[e.split] += 1
        return counts

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------
def _read_token(data: bytes, pos: int) -> tuple:
    """Next whitespace-delimited header token, skipping ``#`` comments."""
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"truncated header at byte {start}")
    return data[start:pos], start, pos


def decode_netpbm(data: bytes) -> Image:
    if len(data) < 2:
        raise FormatError("truncated header at byte 0")
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"bad magic {magic!r} at byte 0 (expected P5 or P6)")
    channels = 1 if magic == b"P5" else 3
    pos = 2
    vals = []
    for name in ("width", "height", "maxval"):
        tok, start, pos = _read_token(data, pos)
        if not tok.isdigit():
            raise FormatError(f"malformed {name} {tok!r} at byte {start}")
        vals.append((int(tok), start))
    (w, w_off), (h, h_off), (maxval, m_off) = vals
    if w < 1:
        raise FormatError(f"width must be >= 1 at byte {w_off}")
    if h < 1:
        raise FormatError(f"height must be >= 1 at byte {h_off}")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} at byte {m_off}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"missing whitespace after header at byte {pos}")
    pos += 1
    need = w * h * channels
    have = len(data) - pos
    if have < need:
        raise FormatError(
            f"truncated payload at byte {len(data)}: expected {need} bytes from offset {pos}, got {have}")
    px = np.frombuffer(data, np.uint8, need, pos)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return Image(px.reshape(shape).copy())


def encode_netpbm(img: Image) -> bytes:
    if not isinstance(img, Image):
        raise TypeError("expected an Image")
    magic = "P5" if img.channels == 1 else "P6"
    header = f"{magic}\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def load_image(path) -> Image:
    """Read a binary PGM (P5) or PPM (P6) file with maxval 255.

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    FormatError
        On a malformed header, unsupported maxval or short payload; the
        message carries the byte offset of the problem.
    """
    data = Path(path).read_bytes()
    return decode_netpbm(data)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory and rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_image(img: Image, path) -> None:
    """Write ``img`` as P5 (one channel) or P6 (three channels)."""
    atomic_write_bytes(path, encode_netpbm(img))


def to_grayscale(img: Image) -> Image:
    """BT.601 luma, ``round(0.299 R + 0.587 G + 0.114 B)`` with halves rounded up.

    Grayscale input is returned as is.
    """
    if img.channels == 1:
        return img
    rgb = img.pixels.astype(np.float64)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return Image(np.clip(np.floor(y + 0.5), 0, 255).astype(np.uint8))


def from_float(a: np.ndarray) -> Image:
    """Grayscale image from values in [0, 1] (rounded, clipped)."""
    return Image(np.clip(np.floor(np.asarray(a) * 255.0 + 0.5), 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# manifests and ground truth
# ---------------------------------------------------------------------------
def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    """Parse a CSV manifest with header ``image_id,path,split``.

    Relative image paths are resolved against the manifest's directory.
    """
    path = Path(path)
    man = DatasetManifest(root=path.parent)
    seen = set()
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None or [h.strip() for h in header] != ["image_id", "path", "split"]:
            raise FormatError(f"{path}: line 1: header must be image_id,path,split")
        for lineno, row in enumerate(rows, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise FormatError(f"{path}: line {lineno}: expected 3 fields, got {len(row)}")
            image_id, p, split = (c.strip() for c in row)
            if not image_id:
                raise FormatError(f"{path}: line {lineno}: empty image_id")
            if split not in SPLITS:
                raise FormatError(f"{path}: line {lineno}: unknown split {split!r}")
            if image_id in seen:
                raise FormatError(f"{path}: line {lineno}: duplicate image_id {image_id!r}")
            seen.add(image_id)
            entry = ManifestEntry(image_id, p, split)
            if check_paths and not man.resolve(entry).exists():
                raise FormatError(f"{path}: line {lineno}: image path not found: {p}")
            man.entries.append(entry)
    return man


def save_manifest(man: DatasetManifest, path) -> None:
    lines = ["image_id,path,split"]
    lines += [f"{e.image_id},{e.path},{e.split}" for e in man.entries]
    atomic_write_text(path, "\n".join(lines) + "\n")


def gt_to_json(g: GroundTruthBox) -> str:
    return json.dumps({"image_id": g.image_id, "bbox": g.bbox.as_list(),
                       "labels": list(g.labels)})


def load_ground_truth(path) -> list:
    """Parse JSON-lines ground truth, one box per line."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("expected a JSON object")
                for key in ("image_id", "bbox", "labels"):
                    if key not in obj:
                        raise ValueError(f"missing field {key!r}")
                labels = obj["labels"]
                if not isinstance(labels, list) or any(
                        isinstance(c, bool) or not isinstance(c, int) for c in labels):
                    raise ValueError("field 'labels' must be a list of integers")
                out.append(GroundTruthBox(str(obj["image_id"]), BBox.from_list(obj["bbox"]),
                                          tuple(labels)))
            except (ValueError, TypeError) as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
    return out


def save_ground_truth(gts, path) -> None:
    atomic_write_text(path, "".join(gt_to_json(g) + "\n" for g in gts))
