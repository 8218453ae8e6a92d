"""Map fusion, salient-region boxes and in-box brightness enhancement."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imgio import BBox, Image, iou
from .morphology import FloatMap, minmax_normalize

N_BINS = 256


@dataclass(eq=False)
class FusedMap:
    """Fused saliency in [0, 1] with a record of how it was produced."""

    map: FloatMap
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        v = self.map.values
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("fused map values must lie in [0, 1]")

    @property
    def values(self) -> np.ndarray:
        return self.map.values

    @property
    def height(self) -> int:
        return self.map.height

    @property
    def width(self) -> int:
        return self.map.width


@dataclass(frozen=True)
class ProposalConfig:
    """Box-extraction policy.

    ``threshold`` is ``"otsu"`` or a fixed level in [0, 1]; pixels strictly
    above it are salient.
    """

    threshold: object = "otsu"
    min_area: int = 25
    pad: int = 4
    merge_iou: float = 0.3
    brightness_gain: float = 1.25

    def __post_init__(self):
        t = self.threshold
        if isinstance(t, str):
            if t != "otsu":
                raise ValueError(f"threshold must be 'otsu' or a number, got {t!r}")
        elif not 0.0 <= float(t) <= 1.0:
            raise ValueError(f"fixed threshold must be in [0, 1], got {t!r}")
        if int(self.min_area) != self.min_area or self.min_area < 1:
            raise ValueError(f"min_area must be an integer >= 1, got {self.min_area!r}")
        if int(self.pad) != self.pad or self.pad < 0:
            raise ValueError(f"pad must be an integer >= 0, got {self.pad!r}")
        if not 0.0 <= float(self.merge_iou) < 1.0:
            raise ValueError(f"merge_iou must be in [0, 1), got {self.merge_iou!r}")
        if not float(self.brightness_gain) >= 1.0:
            raise ValueError(f"brightness_gain must be >= 1, got {self.brightness_gain!r}")


def _values(m) -> np.ndarray:
    if isinstance(m, FusedMap):
        return m.values
    if isinstance(m, FloatMap):
        return m.values
    return np.asarray(m, dtype=np.float64)


def fuse_maps(m: FloatMap, l: FloatMap, provenance: dict | None = None) -> FusedMap:
    """``normalize(normalize(m) + normalize(l))``, each normalization min-max to [0, 1]."""
    a = _values(m)
    b = _values(l)
    if a.shape != b.shape:
        raise ValueError(f"map dimensions differ: {a.shape} vs {b.shape}")
    prov = dict(provenance or {})
    prov["normalization"] = {
        "saliency_min": float(a.min()), "saliency_max": float(a.max()),
        "linearity_min": float(b.min()), "linearity_max": float(b.max()),
    }
    s = minmax_normalize(a) + minmax_normalize(b)
    prov["normalization"].update(sum_min=float(s.min()), sum_max=float(s.max()))
    return FusedMap(FloatMap(minmax_normalize(s)), prov)


def histogram_bins(v: np.ndarray) -> np.ndarray:
    """Bin index of every value: bin ``k`` holds ``(k/256, (k+1)/256]``, bin 0 also holds 0."""
    k = np.ceil(np.asarray(v, dtype=np.float64) * N_BINS).astype(np.int64) - 1
    return np.clip(k, 0, N_BINS - 1)


def otsu_threshold(fmap) -> float:
    """Histogram threshold with maximal between-class variance.

    Candidates are the bin edges ``k / 256``, ``k = 0..255``, splitting the
    map into values ``<= k/256`` and ``> k/256``. The criterion
    ``(n0 * S1 - n1 * S0)**2 / (n0 * n1)`` (``S`` = sum of bin indices) is
    compared exactly in integers; ties go to the lower threshold. A map
    whose values all fall in one bin gives 0.
    """
    v = _values(fmap)
    if v.size == 0:
        raise ValueError("empty map")
    hist = np.bincount(histogram_bins(v).ravel(), minlength=N_BINS).tolist()
    n = sum(hist)
    s_total = sum(i * c for i, c in enumerate(hist))
    best_k = 0
    best_num, best_den = 0, 1
    n0 = 0
    s0 = 0
    for k in range(N_BINS):
        n0 += hist[k]
        s0 += k * hist[k]
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        diff = n0 * (s_total - s0) - n1 * s0
        num = diff * diff
        den = n0 * n1
        if num * best_den > best_num * den:
            best_k, best_num, best_den = k + 1, num, den
    return best_k / N_BINS


def salient_mask(fmap, threshold) -> np.ndarray:
    return _values(fmap) > threshold


@dataclass(frozen=True, eq=False)
class Component:
    """8-connected pixel set; ``pixels`` holds (row, col) pairs in row-major order."""

    pixels: np.ndarray

    @property
    def size(self) -> int:
        return len(self.pixels)

    @property
    def first(self) -> tuple:
        return tuple(int(v) for v in self.pixels[0])

    def bbox(self) -> BBox:
        r0, c0 = self.pixels.min(axis=0)
        r1, c1 = self.pixels.max(axis=0)
        return BBox(int(c0), int(r0), int(c1 - c0 + 1), int(r1 - r0 + 1))


_EIGHT = np.ones((3, 3), dtype=bool)


def connected_components(mask) -> list:
    """8-connected components, largest first, ties by first pixel in row-major order."""
    m = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(m, structure=_EIGHT)
    if n == 0:
        return []
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    sizes = np.bincount(flat, minlength=n + 1)
    starts = np.cumsum(sizes)[:-1]
    W = m.shape[1]
    comps = []
    for lab in range(1, n + 1):
        idx = order[starts[lab - 1]:starts[lab - 1] + sizes[lab]]
        comps.append(Component(np.stack([idx // W, idx % W], axis=1)))
    comps.sort(key=lambda c: (-c.size, c.first))
    return comps


def box_union(a: BBox, b: BBox) -> BBox:
    x = min(a.x, b.x)
    y = min(a.y, b.y)
    return BBox(x, y, max(a.x2, b.x2) - x, max(a.y2, b.y2) - y)


def pad_box(b: BBox, pad: int, width: int, height: int) -> BBox:
    x0 = max(b.x - pad, 0)
    y0 = max(b.y - pad, 0)
    x1 = min(b.x2 + pad, width)
    y1 = min(b.y2 + pad, height)
    return BBox(x0, y0, x1 - x0, y1 - y0)


def merge_boxes(boxes: list, merge_iou: float) -> list:
    """Replace overlapping pairs (IoU > ``merge_iou``) by their union until none remain."""
    boxes = list(boxes)
    changed = True
    while changed:
        changed = False
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                if iou(boxes[i], boxes[j]) > merge_iou:
                    boxes[i] = box_union(boxes[i], boxes[j])
                    del boxes[j]
                    changed = True
                    break
            if changed:
                break
    return boxes


def sort_boxes(boxes: list) -> list:
    return sorted(boxes, key=lambda b: (-b.area, b.y, b.x, b.h, b.w))


def resolve_threshold(fused, cfg: ProposalConfig) -> float:
    return otsu_threshold(fused) if cfg.threshold == "otsu" else float(cfg.threshold)


def propose_boxes(fused, cfg: ProposalConfig = ProposalConfig()) -> list:
    """Padded, merged bounding boxes of the salient components of ``fused``."""
    v = _values(fused)
    H, W = v.shape
    mask = salient_mask(v, resolve_threshold(v, cfg))
    boxes = [pad_box(c.bbox(), cfg.pad, W, H)
             for c in connected_components(mask) if c.size >= cfg.min_area]
    return sort_boxes(merge_boxes(boxes, cfg.merge_iou))


def box_score(fused, b: BBox) -> float:
    """Largest fused value inside ``b``."""
    return float(_values(fused)[b.y:b.y2, b.x:b.x2].max())


def boxes_mask(boxes: list, height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    for b in boxes:
        if not b.fits(width, height):
            raise ValueError(f"box {b.as_list()} outside {width}x{height} image")
        mask[b.y:b.y2, b.x:b.x2] = True
    return mask


def round_half_up(v: np.ndarray) -> np.ndarray:
    return np.floor(v + 0.5)


def enhance(img: Image, boxes: list, gain: float = 1.25) -> Image:
    """Scale intensities by ``gain`` inside the union of ``boxes``.

    Each channel becomes ``clamp(round(v * gain), 0, 255)`` with halves
    rounded up; pixels outside every box are left untouched.
    """
    if not float(gain) >= 1.0:
        raise ValueError(f"gain must be >= 1, got {gain!r}")
    mask = boxes_mask(boxes, img.height, img.width)
    px = img.pixels.copy()
    if mask.any() and gain != 1.0:
        sel = px[mask].astype(np.float64)
        px[mask] = np.clip(round_half_up(sel * float(gain)), 0, 255).astype(np.uint8)
    return Image(px)
