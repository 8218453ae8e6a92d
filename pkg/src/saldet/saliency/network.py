"""Fixed-architecture patch classifier with hand-written backpropagation.

Architecture (input 64x64x1 in [0, 1])::

    conv 3x3, 8 filters, same padding -> ReLU -> 2x2 max-pool
    conv 3x3, 16 filters, same padding -> ReLU -> 2x2 max-pool
    flatten 16x16x16 -> fully connected -> 6 logits

The class score ``S_c`` used for sensitivity maps is the pre-softmax logit.
Max-pool ties go to the first position in row-major window order and the
ReLU derivative at zero is taken as zero.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..imgio import N_CLASSES, atomic_write_bytes, atomic_write_text
from ..morphology import FloatMap
from . import _kernels as K

PATCH = 64

PARAM_SHAPES = {
    "conv1_w": (3, 3, 1, 8),
    "conv1_b": (8,),
    "conv2_w": (3, 3, 8, 16),
    "conv2_b": (16,),
    "fc_w": (N_CLASSES, 16, 16, 16),
    "fc_b": (N_CLASSES,),
}
# (fan_in, fan_out) of each weight tensor for Glorot-uniform init
_FANS = {
    "conv1_w": (9 * 1, 9 * 8),
    "conv2_w": (9 * 8, 9 * 16),
    "fc_w": (16 * 16 * 16, N_CLASSES),
}


@dataclass(eq=False)
class PatchClassifier:
    """Parameters of the patch classifier, keyed by name (see ``PARAM_SHAPES``).

    Weight tensors are treated as immutable: operations that change them
    return a new classifier.
    """

    params: dict

    def __post_init__(self):
        if set(self.params) != set(PARAM_SHAPES):
            raise ValueError(f"expected parameters {sorted(PARAM_SHAPES)}, got {sorted(self.params)}")
        clean = {}
        for name, shape in PARAM_SHAPES.items():
            a = np.array(self.params[name], dtype=np.float64)
            if a.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {a.shape}")
            if not np.isfinite(a).all():
                raise ValueError(f"{name}: non-finite values")
            a.flags.writeable = False
            clean[name] = a
        self.params = clean
        self._layouts = None

    @classmethod
    def initialize(cls, rng_seed: int = 0) -> "PatchClassifier":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(rng_seed)
        params = {}
        for name, shape in PARAM_SHAPES.items():
            if name in _FANS:
                fan_in, fan_out = _FANS[name]
                k = np.sqrt(6.0 / (fan_in + fan_out))
                params[name] = rng.uniform(-k, k, shape)
            else:
                params[name] = np.zeros(shape)
        return cls(params)

    @classmethod
    def zeros(cls) -> "PatchClassifier":
        return cls({name: np.zeros(shape) for name, shape in PARAM_SHAPES.items()})

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def layouts(self) -> dict:
        """Kernel-facing copies of the weights (see ``_kernels``)."""
        if self._layouts is None:
            p = self.params
            w1 = p["conv1_w"].reshape(3, 3, 8)
            w2 = p["conv2_w"]
            self._layouts = {
                "w1f": np.ascontiguousarray(w1.reshape(9, 8)),
                "w1k": np.ascontiguousarray(w1.transpose(2, 0, 1)),
                "b1": np.ascontiguousarray(p["conv1_b"]),
                "w2f": np.ascontiguousarray(w2.reshape(72, 16)),
                "w2s": np.ascontiguousarray(w2.transpose(3, 0, 1, 2).reshape(16, 3, 24)),
                "b2": np.ascontiguousarray(p["conv2_b"]),
                "fcw": np.ascontiguousarray(p["fc_w"]),
                "fcb": np.ascontiguousarray(p["fc_b"]),
            }
        return self._layouts

    def equals(self, other: "PatchClassifier") -> bool:
        return all(np.array_equal(self.params[k], other.params[k]) for k in PARAM_SHAPES)


def check_patch(patch) -> np.ndarray:
    x = np.asarray(patch, dtype=np.float64)
    if x.shape != (PATCH, PATCH):
        raise ValueError(f"patch must be {PATCH}x{PATCH}, got shape {x.shape}")
    if not np.isfinite(x).all() or x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("patch values must lie in [0, 1]")
    return x


def check_class(c) -> int:
    if isinstance(c, bool) or int(c) != c or not 0 <= int(c) < N_CLASSES:
        raise ValueError(f"class id must be in 0..{N_CLASSES - 1}, got {c!r}")
    return int(c)


def pad_patch(x: np.ndarray) -> np.ndarray:
    xp = np.zeros((PATCH + 2, PATCH + 2))
    xp[1:-1, 1:-1] = x
    return xp


def forward(clf: PatchClassifier, patch) -> np.ndarray:
    """The six logits of one 64x64 patch."""
    return forward_batch(clf, check_patch(patch)[None])[0]


def forward_batch(clf: PatchClassifier, patches: np.ndarray) -> np.ndarray:
    """Logits of a stack of patches, shape (n, 64, 64) -> (n, 6)."""
    xb = np.ascontiguousarray(patches, dtype=np.float64)
    if xb.ndim != 3 or xb.shape[1:] != (PATCH, PATCH):
        raise ValueError(f"patches must have shape (n, {PATCH}, {PATCH}), got {xb.shape}")
    L = clf.layouts()
    out = np.empty((xb.shape[0], N_CLASSES))
    K.patch_logits(xb, L["w1f"], L["b1"], L["w2f"], L["b2"], L["fcw"], L["fcb"], out)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logit_gradient(clf: PatchClassifier, patch, c: int) -> np.ndarray:
    """Signed ``d logit[c] / d patch`` by reverse-mode backpropagation."""
    x = check_patch(patch)
    c = check_class(c)
    return _signed_gradient(clf, pad_patch(x), c)


def _signed_gradient(clf: PatchClassifier, xp: np.ndarray, c: int) -> np.ndarray:
    L = clf.layouts()
    out = np.empty((PATCH, PATCH))
    K.patch_gradient(xp, c, L["w1f"], L["b1"], L["w2f"], L["b2"], L["w2s"], L["w1k"],
                     L["fcw"], out)
    return out


def input_gradient(clf: PatchClassifier, patch, c: int) -> FloatMap:
    """Sensitivity map ``|d S_c / d x|`` of one patch."""
    return FloatMap(np.abs(logit_gradient(clf, patch, c)))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
def _stack_samples(samples) -> tuple:
    if len(samples) == 0:
        raise ValueError("empty training set")
    xs = []
    ys = []
    for patch, label in samples:
        xs.append(check_patch(patch))
        ys.append(check_class(label))
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


def batch_loss_and_grads(clf: PatchClassifier, xb: np.ndarray, labels: np.ndarray) -> tuple:
    """Summed cross-entropy of a batch and its parameter gradients (summed, not averaged)."""
    L = clf.layouts()
    g_w1f = np.zeros((9, 8))
    g_b1 = np.zeros(8)
    g_w2s = np.zeros((16, 3, 24))
    g_b2 = np.zeros(16)
    g_fcw = np.zeros(PARAM_SHAPES["fc_w"])
    g_fcb = np.zeros(N_CLASSES)
    loss = K.batch_grads(np.ascontiguousarray(xb, dtype=np.float64),
                         np.ascontiguousarray(labels, dtype=np.int64),
                         L["w1f"], L["b1"], L["w2f"], L["b2"], L["w2s"], L["w1k"],
                         L["fcw"], L["fcb"], g_w1f, g_b1, g_w2s, g_b2, g_fcw, g_fcb)
    grads = {
        "conv1_w": g_w1f.reshape(PARAM_SHAPES["conv1_w"]),
        "conv1_b": g_b1,
        "conv2_w": g_w2s.reshape(16, 3, 3, 8).transpose(1, 2, 3, 0),
        "conv2_b": g_b2,
        "fc_w": g_fcw,
        "fc_b": g_fcb,
    }
    return loss, grads


def train(clf: PatchClassifier, samples, epochs: int, lr: float, rng_seed: int = 0,
          batch_size: int = 8, require_all_classes: bool = True) -> tuple:
    """Minibatch SGD on softmax cross-entropy.

    Each epoch visits the samples in a seeded random order in batches of
    ``batch_size``; each step moves the parameters by ``-lr`` times the
    batch-mean gradient.

    Returns
    -------
    (PatchClassifier, list of float)
        Trained classifier and the mean training loss of every epoch
        (measured during that epoch, before each step's update).
    """
    xs, ys = _stack_samples(samples)
    if require_all_classes:
        missing = sorted(set(range(N_CLASSES)) - set(ys.tolist()))
        if missing:
            raise ValueError(f"no training samples for classes {missing}")
    if epochs < 0 or batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    rng = np.random.default_rng(rng_seed)
    params = {k: v.copy() for k, v in clf.params.items()}
    cur = clf
    trace = []
    n = len(ys)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            loss, grads = batch_loss_and_grads(cur, xs[idx], ys[idx])
            total += loss
            if lr != 0.0:
                step = lr / len(idx)
                for k in params:
                    params[k] -= step * grads[k]
                cur = PatchClassifier(params)
                params = {k: v.copy() for k, v in cur.params.items()}
        trace.append(total / n)
    return cur, trace


def cross_entropy(clf: PatchClassifier, patch, label: int) -> float:
    z = forward(clf, patch)
    m = z.max()
    return float(np.log(np.exp(z - m).sum()) - (z[label] - m))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------
def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(clf: PatchClassifier, path) -> None:
    """Raw little-endian float64 blob at ``path`` plus ``path + '.json'`` index."""
    buf = io.BytesIO()
    index = []
    offset = 0
    for name, shape in PARAM_SHAPES.items():
        data = clf.params[name].astype("<f8").tobytes()
        index.append({"name": name, "shape": list(shape), "offset": offset,
                      "dtype": "float64-le"})
        buf.write(data)
        offset += len(data)
    atomic_write_bytes(path, buf.getvalue())
    atomic_write_text(_sidecar(path), json.dumps({"tensors": index, "total_bytes": offset},
                                                  indent=2) + "\n")


def load_checkpoint(path) -> PatchClassifier:
    blob = Path(path).read_bytes()
    meta = json.loads(_sidecar(path).read_text())
    params = {}
    for t in meta["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape))
        end = t["offset"] + 8 * count
        if end > len(blob):
            raise ValueError(f"checkpoint truncated: tensor {t['name']} ends at byte {end}")
        params[t["name"]] = np.frombuffer(blob, "<f8", count, t["offset"]).reshape(shape)
    return PatchClassifier(params)


def save_loss_trace(trace, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "mean_loss"])
    for i, v in enumerate(trace, start=1):
        w.writerow([i, repr(float(v))])
    atomic_write_text(path, buf.getvalue())
