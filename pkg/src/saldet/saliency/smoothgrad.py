"""SmoothGrad sensitivity maps for patches and whole images."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..imgio import Image
from ..morphology import FloatMap, minmax_normalize
from . import _kernels as K
from .network import PATCH, PatchClassifier, _signed_gradient, check_class, check_patch, pad_patch

STRIDE = 32


@dataclass(frozen=True)
class SmoothGradConfig:
    """Noise-averaging settings.

    ``sigma`` is the noise standard deviation as a fraction of the input's
    dynamic range (max minus min of the patch, or of the whole image when
    assembling a full map).
    """

    n_samples: int = 25
    sigma: float = 0.10
    rng_seed: int = 0

    def __post_init__(self):
        if isinstance(self.n_samples, bool) or int(self.n_samples) != self.n_samples \
                or self.n_samples < 1:
            raise ValueError(f"n_samples must be an integer >= 1, got {self.n_samples!r}")
        if not 0.0 <= float(self.sigma) <= 1.0:
            raise ValueError(f"sigma must be in [0, 1], got {self.sigma!r}")
        if int(self.rng_seed) != self.rng_seed or not -2**63 <= self.rng_seed < 2**64:
            raise ValueError(f"rng_seed must be a 64-bit integer, got {self.rng_seed!r}")


def _rng(cfg: SmoothGradConfig) -> np.random.Generator:
    return np.random.default_rng(int(cfg.rng_seed) & 0xFFFFFFFFFFFFFFFF)


def _noisy(x: np.ndarray, rng: np.random.Generator, std: float) -> np.ndarray:
    if std == 0.0:
        return x
    return np.clip(x + std * rng.standard_normal(x.shape), 0.0, 1.0)


def smoothgrad(clf: PatchClassifier, patch, c: int, cfg: SmoothGradConfig = SmoothGradConfig()) -> FloatMap:
    """Mean of ``|d S_c / d x|`` over ``n_samples`` noisy, clamped copies of ``patch``."""
    x = check_patch(patch)
    c = check_class(c)
    rng = _rng(cfg)
    std = cfg.sigma * float(x.max() - x.min())
    acc = np.zeros((PATCH, PATCH))
    xp = np.zeros((PATCH + 2, PATCH + 2))
    for _ in range(cfg.n_samples):
        xp[1:-1, 1:-1] = _noisy(x, rng, std)
        acc += np.abs(_signed_gradient(clf, xp, c))
    return FloatMap(acc / cfg.n_samples)


def tile_origins(n: int) -> list:
    """Start offsets of 64-px tiles at stride 32, plus a flush tile at the far edge."""
    if n < PATCH:
        raise ValueError(f"image dimension {n} is smaller than one {PATCH}-px patch")
    starts = list(range(0, n - PATCH + 1, STRIDE))
    if starts[-1] != n - PATCH:
        starts.append(n - PATCH)
    return starts


def tile_grid(height: int, width: int) -> np.ndarray:
    """All tile origins ``(y, x)`` in row-major order, shape (n, 2)."""
    return np.array([(y, x) for y in tile_origins(height) for x in tile_origins(width)],
                    dtype=np.int64).reshape(-1, 2)


class _TileEngine:
    """Logits and gradients for many 64x64 tiles of one raster.

    Tiles whose origin is a multiple of 4 in both axes share one forward pass
    over the whole raster and only recompute their borders; any other tile
    is evaluated on its own. Both routes give the same result as running the
    tile through the classifier in isolation.
    """

    def __init__(self, clf: PatchClassifier, height: int, width: int, tiles: np.ndarray):
        self.L = clf.layouts()
        self.clf = clf
        self.tiles = tiles
        self.shared = (tiles[:, 0] % 4 == 0) & (tiles[:, 1] % 4 == 0)
        self.shared_tiles = np.ascontiguousarray(tiles[self.shared])
        self.solo = np.flatnonzero(~self.shared)
        self.scratch = K.alloc_full(height, width)
        self.xp = np.zeros((height + 2, width + 2))

    def load(self, x: np.ndarray) -> None:
        self.xp[1:-1, 1:-1] = x

    def logits(self) -> np.ndarray:
        L = self.L
        out = np.empty((len(self.tiles), 6))
        if len(self.shared_tiles):
            sub = np.empty((len(self.shared_tiles), 6))
            K.tiles_logits(self.xp, self.shared_tiles, L["w1f"], L["b1"], L["w2f"], L["b2"],
                           L["fcw"], L["fcb"], *self.scratch, sub)
            out[self.shared] = sub
        if len(self.solo):
            x = self.xp[1:-1, 1:-1]
            stack = np.stack([x[y:y + PATCH, xx:xx + PATCH] for y, xx in self.tiles[self.solo]])
            sub = np.empty((len(self.solo), 6))
            K.patch_logits(np.ascontiguousarray(stack), L["w1f"], L["b1"], L["w2f"], L["b2"],
                           L["fcw"], L["fcb"], sub)
            out[self.solo] = sub
        return out

    def add_abs_gradients(self, classes: np.ndarray, acc: np.ndarray) -> None:
        """Add ``|d logit[classes[t]] / d x|`` of every tile ``t`` into ``acc`` at its origin."""
        L = self.L
        if len(self.shared_tiles):
            K.tiles_abs_gradient(self.xp, self.shared_tiles, np.ascontiguousarray(classes[self.shared]),
                                 L["w1f"], L["b1"], L["w2f"], L["b2"], L["w2s"], L["w1k"],
                                 L["fcw"], *self.scratch, acc)
        x = self.xp[1:-1, 1:-1]
        for t in self.solo:
            y, xx = self.tiles[t]
            g = _signed_gradient(self.clf, pad_patch(x[y:y + PATCH, xx:xx + PATCH]),
                                 int(classes[t]))
            acc[y:y + PATCH, xx:xx + PATCH] += np.abs(g)


def tile_classes(logits: np.ndarray) -> np.ndarray:
    """Per tile, the defect class (1..5) with the largest logit."""
    return (1 + np.argmax(logits[:, 1:], axis=1)).astype(np.int64)


def image_saliency(clf: PatchClassifier, img: Image, cfg: SmoothGradConfig = SmoothGradConfig()) -> FloatMap:
    """Full-image SmoothGrad map normalized to [0, 1].

    The image is covered by 64x64 tiles at stride 32 (the last row and column
    of tiles sit flush with the far edges). Each tile is attributed to its
    highest-scoring defect class on the clean image; its SmoothGrad map is
    accumulated, every pixel is divided by the number of tiles covering it,
    and the result is min-max normalized. One noise field per sample is
    drawn over the whole image, so overlapping tiles see the same
    perturbation. An image with no contrast has no structure to attribute
    and yields an all-zero map.
    """
    if img.channels != 1:
        raise ValueError("image_saliency needs a grayscale image")
    H, W = img.height, img.width
    tiles = tile_grid(H, W)
    x = img.as_float()
    span = float(x.max() - x.min())
    if span == 0.0:
        return FloatMap(np.zeros((H, W)))
    eng = _TileEngine(clf, H, W, tiles)
    eng.load(x)
    classes = tile_classes(eng.logits())

    counts = np.zeros((H, W))
    for y, xx in tiles:
        counts[y:y + PATCH, xx:xx + PATCH] += 1.0
    rng = _rng(cfg)
    std = cfg.sigma * span
    acc = np.zeros((H, W))
    for _ in range(cfg.n_samples):
        eng.load(_noisy(x, rng, std))
        eng.add_abs_gradients(classes, acc)
    return FloatMap(minmax_normalize(acc / cfg.n_samples / counts))
