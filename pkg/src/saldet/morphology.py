"""Grayscale morphology and the bottom-hat linearity map.

Borders are handled by edge replication throughout, so a flat image is a
fixed point of every operator here and thin dark structures touching the
border are not confused with the border itself.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imgio import FormatError, Image, atomic_write_bytes, encode_netpbm


@dataclass(frozen=True)
class StructuringElement:
    """Square (side ``2 * radius + 1``) or disk (``dx**2 + dy**2 <= radius**2``)."""

    shape: str = "square"
    radius: int = 3

    def __post_init__(self):
        if self.shape not in ("square", "disk"):
            raise ValueError(f"shape must be 'square' or 'disk', got {self.shape!r}")
        if isinstance(self.radius, bool) or int(self.radius) != self.radius or self.radius < 1:
            raise ValueError(f"radius must be an integer >= 1, got {self.radius!r}")
        object.__setattr__(self, "radius", int(self.radius))

    def footprint(self) -> np.ndarray:
        r = self.radius
        if self.shape == "square":
            return np.ones((2 * r + 1, 2 * r + 1), bool)
        dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
        return dy * dy + dx * dx <= r * r

    def row_extents(self) -> list:
        """Per row offset ``dy``, the half-width of the element on that row."""
        fp = self.footprint()
        r = self.radius
        return [(dy - r, int(fp[dy].sum()) // 2) for dy in range(2 * r + 1)]


@dataclass(eq=False)
class FloatMap:
    """Real-valued raster of shape (height, width)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"FloatMap needs a non-empty 2-D array, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("FloatMap values must be finite")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FloatMap):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(
            np.array_equal(self.values, other.values))

    __hash__ = None


def _gray(img: Image) -> np.ndarray:
    if img.channels != 1:
        raise ValueError("morphology needs a single-channel image")
    return img.pixels


def _line_extreme(a: np.ndarray, half: int, axis: int, op) -> np.ndarray:
    """Running min/max over a centred window of ``2 * half + 1`` along ``axis``."""
    if half == 0:
        return a
    n = a.shape[axis]
    pad = [(0, 0), (0, 0)]
    pad[axis] = (half, half)
    p = np.pad(a, pad, mode="edge")
    out = None
    for k in range(2 * half + 1):
        sl = p[k:k + n, :] if axis == 0 else p[:, k:k + n]
        out = sl.copy() if out is None else op(out, sl, out=out)
    return out


def _rank(x: np.ndarray, se: StructuringElement, op) -> np.ndarray:
    if se.shape == "square":
        return _line_extreme(_line_extreme(x, se.radius, 1, op), se.radius, 0, op)
    # disk: one horizontal run per row of the element, then shift vertically
    r = se.radius
    H = x.shape[0]
    runs = {}
    out = None
    for dy, half in se.row_extents():
        if half not in runs:
            runs[half] = np.pad(_line_extreme(x, half, 1, op), ((r, r), (0, 0)), mode="edge")
        sl = runs[half][r + dy:r + dy + H]
        out = sl.copy() if out is None else op(out, sl, out=out)
    return out


def erode(img: Image, se: StructuringElement = StructuringElement()) -> Image:
    """Minimum over the element's neighbourhood, edge-replicated borders."""
    return Image(_rank(_gray(img), se, np.minimum))


def dilate(img: Image, se: StructuringElement = StructuringElement()) -> Image:
    """Maximum over the element's neighbourhood, edge-replicated borders."""
    return Image(_rank(_gray(img), se, np.maximum))


def closing(img: Image, se: StructuringElement = StructuringElement()) -> Image:
    """Dilation followed by erosion; fills dark gaps narrower than ``se``."""
    return erode(dilate(img, se), se)


def linearity_map(img: Image, se: StructuringElement = StructuringElement()) -> FloatMap:
    """Bottom-hat ``closing(x) - x`` as reals in [0, 255].

    Closing is extensive, so this equals ``|x - closing(x)|``.
    """
    x = _gray(img)
    c = closing(img, se).pixels
    return FloatMap(c.astype(np.float64) - x.astype(np.float64))


def minmax_normalize(a: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant array maps to zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo = a.min()
    hi = a.max()
    if not hi > lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------
_RAW_HEADER = struct.Struct("<II")


def floatmap_to_bytes(m: FloatMap) -> bytes:
    """8-byte header (uint32 width, height) then float32 values, little-endian."""
    return _RAW_HEADER.pack(m.width, m.height) + m.values.astype("<f4").tobytes()


def floatmap_from_bytes(data: bytes) -> FloatMap:
    if len(data) < _RAW_HEADER.size:
        raise FormatError(f"truncated float map header at byte {len(data)}")
    w, h = _RAW_HEADER.unpack_from(data)
    need = _RAW_HEADER.size + 4 * w * h
    if len(data) != need:
        raise FormatError(f"float map payload size mismatch at byte {len(data)}: expected {need}")
    vals = np.frombuffer(data, "<f4", w * h, _RAW_HEADER.size).reshape(h, w)
    return FloatMap(vals.astype(np.float64))


def save_floatmap(m: FloatMap, path) -> None:
    atomic_write_bytes(path, floatmap_to_bytes(m))


def load_floatmap(path) -> FloatMap:
    return floatmap_from_bytes(Path(path).read_bytes())


def floatmap_to_image(m: FloatMap) -> Image:
    """Lossy 8-bit view after min-max normalization."""
    v = minmax_normalize(m.values)
    return Image(np.clip(np.floor(v * 255.0 + 0.5), 0, 255).astype(np.uint8))


def save_floatmap_pgm(m: FloatMap, path) -> None:
    atomic_write_bytes(path, encode_netpbm(floatmap_to_image(m)))
