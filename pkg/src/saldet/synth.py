"""Seeded synthetic concrete-defect dataset.

Every defect image carries one defect of its class on a mid-gray textured
background; a share of pure-background images has no annotation at all.
Each image is rendered from its own seed, so the output does not depend on
rendering order.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imgio import (CLASS_NAMES, DEFECT_CLASSES, BBox, DatasetManifest, GroundTruthBox, Image,
                    ManifestEntry, atomic_write_text, save_ground_truth, save_image, save_manifest)

SPLIT_RATIOS = (0.7, 0.2, 0.1)


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings; intensity figures are on the 0..255 scale.

    ``counts`` overrides ``count_per_class`` for individual classes (keys are
    class ids). ``test_crack_contrast``, when set, replaces the crack contrast
    range for images in the test split.
    """

    count_per_class: int = 10
    counts: dict = field(default_factory=dict)
    size: int = 256
    background_fraction: float = 0.1
    texture_noise: float = 3.0
    texture_relief: float = 8.0
    base_level: tuple = (115.0, 145.0)
    defect_extent: tuple = (44, 60)
    crack_width: tuple = (1.5, 3.0)
    crack_contrast: tuple = (45.0, 80.0)
    crack_vertices: int = 5
    test_crack_contrast: tuple | None = None
    blob_contrast: tuple = (40.0, 70.0)
    blob_roughness: float = 0.18
    bar_contrast: tuple = (70.0, 95.0)
    bar_width: tuple = (4.0, 6.0)
    efflorescence_gain: tuple = (40.0, 70.0)
    stain_contrast: tuple = (20.0, 35.0)
    seed: int = 0

    def __post_init__(self):
        if int(self.count_per_class) != self.count_per_class or self.count_per_class < 1:
            raise ValueError("count_per_class must be an integer >= 1")
        for c, n in self.counts.items():
            if int(c) not in DEFECT_CLASSES or int(n) != n or n < 1:
                raise ValueError(f"bad class count {c}: {n}")
        if int(self.size) != self.size or self.size < 64:
            raise ValueError("size must be an integer >= 64")
        if self.defect_extent[1] > self.size - 8:
            raise ValueError("defect extent does not fit the image")
        if not 0.0 <= self.background_fraction < 1.0:
            raise ValueError("background_fraction must be in [0, 1)")

    def class_count(self, c: int) -> int:
        return int(self.counts.get(c, self.counts.get(str(c), self.count_per_class)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = {str(k): v for k, v in self.counts.items()}
        return d


def split_sizes(n: int, ratios=SPLIT_RATIOS) -> tuple:
    """Train/val/test sizes for ``n`` items; rounding leftovers go to test."""
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def assign_splits(n: int, rng: np.random.Generator, ratios=SPLIT_RATIOS) -> list:
    n_train, n_val, _ = split_sizes(n, ratios)
    order = rng.permutation(n)
    out = [""] * n
    for rank, i in enumerate(order):
        out[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return out


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------
def _background(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    n = cfg.size
    base = rng.uniform(*cfg.base_level)
    relief = ndimage.gaussian_filter(rng.standard_normal((n, n)), 12.0, mode="wrap")
    relief *= cfg.texture_relief / (relief.std() + 1e-12)
    grain = cfg.texture_noise * rng.standard_normal((n, n))
    return base + relief + grain


def _segment_distance(py, px, a, b) -> np.ndarray:
    d = b - a
    L2 = float(d @ d)
    t = ((py - a[0]) * d[0] + (px - a[1]) * d[1]) / L2 if L2 > 0 else np.zeros_like(py)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(py - (a[0] + t * d[0]), px - (a[1] + t * d[1]))


def _crack(rng, cfg, origin, extent, contrast_range) -> tuple:
    """Dark anti-aliased polyline wandering corner to corner of its square."""
    y0, x0 = origin
    k = cfg.crack_vertices
    ts = np.linspace(0.0, 1.0, k)
    flip = rng.random() < 0.5
    ys = y0 + ts * (extent - 1)
    xs = x0 + (ts[::-1] if flip else ts) * (extent - 1)
    jitter = rng.uniform(-0.18, 0.18, size=(2, k)) * extent
    jitter[:, [0, -1]] = 0.0
    ys = np.clip(ys + jitter[0], y0, y0 + extent - 1)
    xs = np.clip(xs + jitter[1], x0, x0 + extent - 1)
    pts = np.stack([ys, xs], axis=1)
    width = rng.uniform(*cfg.crack_width)
    n = cfg.size
    py, px = np.mgrid[0:n, 0:n].astype(np.float64)
    dist = np.full((n, n), np.inf)
    for a, b in zip(pts[:-1], pts[1:]):
        dist = np.minimum(dist, _segment_distance(py, px, a, b))
    cover = np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)
    return -rng.uniform(*contrast_range) * cover, cover >= 0.5


def _blob_mask(rng, cfg, center, radius, n, softness=1.0) -> np.ndarray:
    py, px = np.mgrid[0:n, 0:n].astype(np.float64)
    dy = py - center[0]
    dx = px - center[1]
    theta = np.arctan2(dy, dx)
    r = np.hypot(dy, dx)
    edge = np.ones_like(theta)
    for k in range(2, 6):
        edge += cfg.blob_roughness / k * rng.uniform(0.5, 1.0) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    return np.clip((radius * edge - r) / softness + 0.5, 0.0, 1.0)


def _spall(rng, cfg, origin, extent) -> tuple:
    c = (origin[0] + extent / 2.0, origin[1] + extent / 2.0)
    cover = _blob_mask(rng, cfg, c, extent * 0.46, cfg.size, softness=2.0)
    rough = ndimage.gaussian_filter(rng.standard_normal((cfg.size, cfg.size)), 1.5) * 12.0
    delta = -rng.uniform(*cfg.blob_contrast) * cover + rough * cover
    return delta, cover, c


def _bar(rng, cfg, center, extent, inside) -> np.ndarray:
    """Straight dark bar through ``center``, visible only inside the blob."""
    n = cfg.size
    ang = rng.uniform(0, np.pi)
    d = np.array([np.sin(ang), np.cos(ang)]) * extent
    a = np.asarray(center) - d
    b = np.asarray(center) + d
    py, px = np.mgrid[0:n, 0:n].astype(np.float64)
    dist = _segment_distance(py, px, a, b)
    cover = np.clip(rng.uniform(*cfg.bar_width) / 2.0 + 0.5 - dist, 0.0, 1.0) * inside
    return -rng.uniform(*cfg.bar_contrast) * cover


def _efflorescence(rng, cfg, origin, extent) -> tuple:
    c = (origin[0] + extent / 2.0, origin[1] + extent / 2.0)
    core = _blob_mask(rng, cfg, c, extent * 0.50, cfg.size, softness=4.0)
    haze = ndimage.gaussian_filter(rng.random((cfg.size, cfg.size)), 3.0)
    haze = 0.75 + 0.5 * (haze - haze.min()) / (np.ptp(haze) + 1e-12)
    cover = np.clip(core * haze, 0.0, 1.0)
    return rng.uniform(*cfg.efflorescence_gain) * cover, cover >= 0.5


def _stain(rng, cfg, origin, extent) -> tuple:
    n = cfg.size
    c = (origin[0] + extent * 0.42, origin[1] + extent / 2.0)
    head = _blob_mask(rng, cfg, c, extent * 0.42, n, softness=3.0)
    py, px = np.mgrid[0:n, 0:n].astype(np.float64)
    half_w = extent * rng.uniform(0.10, 0.16)
    tail_len = extent * rng.uniform(0.50, 0.56)
    along = np.clip((py - c[0]) / tail_len, 0.0, 1.0)
    tail = ((py >= c[0]) & (py <= c[0] + tail_len)).astype(np.float64)
    tail *= np.clip(half_w * (1.0 - 0.6 * along) - np.abs(px - c[1]) + 0.5, 0.0, 1.0)
    cover = np.maximum(head, tail * (1.0 - 0.4 * along))
    return -rng.uniform(*cfg.stain_contrast) * cover, cover >= 0.5


def _mask_box(mask: np.ndarray) -> BBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


def render_image(cls: int, seed, cfg: SynthConfig, split: str = "train") -> tuple:
    """Render one image of class ``cls`` (0 = background).

    Returns the image and its ``(bbox, labels)`` annotations.
    """
    rng = np.random.default_rng(seed)
    x = _background(rng, cfg)
    annots = []
    if cls != 0:
        extent = int(rng.integers(cfg.defect_extent[0], cfg.defect_extent[1] + 1))
        lo = 4
        hi = cfg.size - extent - 4
        origin = (int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))
        if cls == 1:
            rng_c = cfg.test_crack_contrast if (split == "test" and cfg.test_crack_contrast) \
                else cfg.crack_contrast
            delta, mask = _crack(rng, cfg, origin, extent, rng_c)
            labels = (1,)
        elif cls in (2, 3):
            delta, cover, center = _spall(rng, cfg, origin, extent)
            mask = cover >= 0.5
            labels = (2,)
            if cls == 3:
                delta = delta + _bar(rng, cfg, center, extent, cover)
                labels = (2, 3)
        elif cls == 4:
            delta, mask = _efflorescence(rng, cfg, origin, extent)
            labels = (4,)
        else:
            delta, mask = _stain(rng, cfg, origin, extent)
            labels = (5,)
        x = x + delta
        annots.append((_mask_box(mask), labels))
    px = np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)
    return Image(px), annots


def plan(cfg: SynthConfig) -> list:
    """``(image_id, class, split, seed)`` for every image, in manifest order."""
    groups = [(c, cfg.class_count(c)) for c in DEFECT_CLASSES]
    n_defect = sum(n for _, n in groups)
    n_bg = int(round(cfg.background_fraction * n_defect))
    if n_bg:
        groups.append((0, n_bg))
    ss = np.random.SeedSequence(cfg.seed)
    split_rng = np.random.default_rng(ss.spawn(1)[0])
    out = []
    for c, n in groups:
        splits = assign_splits(n, split_rng)
        for i in range(n):
            out.append((f"{CLASS_NAMES[c]}_{i:04d}", c, splits[i], (cfg.seed, c, i)))
    return out


def cmd_synth(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Write images, ``ground_truth.jsonl``, ``manifest.csv`` and the config echo."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    man = DatasetManifest(root=out)
    gts = []
    for image_id, c, split, seed in plan(cfg):
        img, annots = render_image(c, seed, cfg, split)
        rel = f"images/{image_id}.pgm"
        save_image(img, out / rel)
        man.entries.append(ManifestEntry(image_id, rel, split))
        for box, labels in annots:
            gts.append(GroundTruthBox(image_id, box, labels))
    save_ground_truth(gts, out / "ground_truth.jsonl")
    save_manifest(man, out / "manifest.csv")
    atomic_write_text(out / "synth_config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return man
