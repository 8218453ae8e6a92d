"""Compiled inner loops for the patch classifier.

Activations are channel-last. Weight layouts used throughout:

    w1f  (9, 8)             conv1, row = dy * 3 + dx
    w1k  (8, 3, 3)          conv1 per output channel, for the backward scatter
    b1   (8,)
    w2f  (72, 16)           conv2, row = (dy * 3 + dx) * 8 + in
    w2s  (16, 3, 24)        conv2 as [out, dy, dx * 8 + in], for the backward scatter
    b2   (16,)
    fcw  (6, 16, 16, 16)    head over the pooled (row, col, channel) map
    fcb  (6,)

Padded buffers carry a one-pixel zero border so that ``buf[y + dy, x + dx]``
with ``dy, dx in 0..2`` is the 3x3 neighbourhood of output ``(y, x)``.
Pool argmax codes are ``2 * row_offset + col_offset`` or -1 when the pooled
ReLU output is zero (no gradient flows).
"""
from __future__ import annotations

import os

# SLP vectorisation roughly doubles conv throughput; it must be set before
# numba reads its config, so it has no effect if numba was imported first.
os.environ.setdefault("NUMBA_SLP_VECTORIZE", "1")

import numba as nb  # noqa: E402
import numpy as np  # noqa: E402

_FASTMATH = {"contract", "reassoc", "nsz"}


def _jit(fn):
    return nb.njit(cache=True, fastmath=_FASTMATH, nogil=True)(fn)


PATCH = 64
C1 = 8
C2 = 16
N_CLASSES = 6


# ---------------------------------------------------------------------------
# register-resident accumulators: tuples stay in SSA registers, arrays do not
# ---------------------------------------------------------------------------
@nb.njit(fastmath=_FASTMATH, inline="always")
def _load8(w):
    return (w[0], w[1], w[2], w[3], w[4], w[5], w[6], w[7])


@nb.njit(fastmath=_FASTMATH, inline="always")
def _fma8(a, v, w):
    return (a[0] + v * w[0], a[1] + v * w[1], a[2] + v * w[2], a[3] + v * w[3],
            a[4] + v * w[4], a[5] + v * w[5], a[6] + v * w[6], a[7] + v * w[7])


@nb.njit(fastmath=_FASTMATH, inline="always")
def _load16(w):
    return (w[0], w[1], w[2], w[3], w[4], w[5], w[6], w[7],
            w[8], w[9], w[10], w[11], w[12], w[13], w[14], w[15])


@nb.njit(fastmath=_FASTMATH, inline="always")
def _fma16(a, v, w):
    return (a[0] + v * w[0], a[1] + v * w[1], a[2] + v * w[2], a[3] + v * w[3],
            a[4] + v * w[4], a[5] + v * w[5], a[6] + v * w[6], a[7] + v * w[7],
            a[8] + v * w[8], a[9] + v * w[9], a[10] + v * w[10], a[11] + v * w[11],
            a[12] + v * w[12], a[13] + v * w[13], a[14] + v * w[14], a[15] + v * w[15])


# ---------------------------------------------------------------------------
# dense layers over a whole raster
# ---------------------------------------------------------------------------
@_jit
def conv1_full(xp, w1f, b1, z1):
    """``w1f`` is conv1 flattened to (9, 8)."""
    b = _load8(b1)
    for y in range(z1.shape[0]):
        for x in range(z1.shape[1]):
            acc = b
            for dy in range(3):
                for dx in range(3):
                    acc = _fma8(acc, xp[y + dy, x + dx], w1f[dy * 3 + dx])
            out = z1[y, x]
            for k in nb.literal_unroll(range(C1)):
                out[k] = acc[k]


@_jit
def relu_pool(z, ap, idx):
    """2x2 max-pool of relu(z) into the interior of padded ``ap``."""
    H2 = idx.shape[0]
    W2 = idx.shape[1]
    C = idx.shape[2]
    for py in range(H2):
        for px in range(W2):
            for k in range(C):
                best = 0.0
                bi = -1
                for d in range(4):
                    v = z[2 * py + (d >> 1), 2 * px + (d & 1), k]
                    if v > best:
                        best = v
                        bi = d
                ap[py + 1, px + 1, k] = best
                idx[py, px, k] = bi


@_jit
def _conv2_at(ap, y, x, w2f, b2, out):
    """``w2f`` is conv2 flattened to (72, 16), row = (dy * 3 + dx) * 8 + in."""
    acc = _load16(b2)
    k = 0
    for dy in range(3):
        for dx in range(3):
            for ci in range(C1):
                acc = _fma16(acc, ap[y + dy, x + dx, ci], w2f[k])
                k += 1
    for o in nb.literal_unroll(range(C2)):
        out[o] = acc[o]


@_jit
def conv2_full(ap, w2f, b2, z2):
    for y in range(z2.shape[0]):
        for x in range(z2.shape[1]):
            _conv2_at(ap, y, x, w2f, b2, z2[y, x])


@_jit
def pool2(z2, a2, idx2):
    for py in range(16):
        for px in range(16):
            for o in range(C2):
                best = 0.0
                bi = -1
                for d in range(4):
                    v = z2[2 * py + (d >> 1), 2 * px + (d & 1), o]
                    if v > best:
                        best = v
                        bi = d
                a2[py, px, o] = best
                idx2[py, px, o] = bi


@_jit
def head(a2, fcw, fcb, logits):
    for c in range(N_CLASSES):
        s = fcb[c]
        for py in range(16):
            for px in range(16):
                for o in range(C2):
                    s += a2[py, px, o] * fcw[c, py, px, o]
        logits[c] = s


# ---------------------------------------------------------------------------
# per-tile assembly on top of a shared full-raster forward pass
# ---------------------------------------------------------------------------
@_jit
def _edge_conv1(xp, Y, X, ty, tx, w1f, b1, out):
    # conv1 at tile pixel (ty, tx) with zero padding at the tile boundary
    acc = _load8(b1)
    for dy in range(3):
        yy = ty + dy - 1
        if yy < 0 or yy >= PATCH:
            continue
        for dx in range(3):
            xx = tx + dx - 1
            if xx < 0 or xx >= PATCH:
                continue
            acc = _fma8(acc, xp[Y + yy + 1, X + xx + 1], w1f[dy * 3 + dx])
    for k in nb.literal_unroll(range(C1)):
        out[k] = acc[k]


@_jit
def assemble_tile(Y, X, xp, z1, a1p, idx1, w1f, b1, w2f, b2,
                  t_a1p, r_idx1, t_z2, edges):
    """Border activations of the 64x64 tile at (Y, X) run on its own.

    Y and X must be multiples of 4 so both pooling grids line up with the
    shared pass. Only the outer pixel ring of conv1, the one-cell ring of the
    first pooled map (written to ``t_a1p`` / ``r_idx1``) and the two-cell
    ring of conv2 (written to ``t_z2``) differ from the shared pass; every
    other entry of those buffers is stale and must not be read.
    ``edges`` is scratch of shape (4, 64, 8): top, bottom, left, right.
    """
    PY = Y // 2
    PX = X // 2
    # band of the first pooled map that the conv2 ring reads
    for i in range(32):
        band_row = i < 3 or i > 28
        for j in range(32):
            if band_row or j < 3 or j > 28:
                for k in range(C1):
                    t_a1p[i + 1, j + 1, k] = a1p[PY + i + 1, PX + j + 1, k]

    last = PATCH - 1
    for t in range(PATCH):
        _edge_conv1(xp, Y, X, 0, t, w1f, b1, edges[0, t])
        _edge_conv1(xp, Y, X, last, t, w1f, b1, edges[1, t])
        _edge_conv1(xp, Y, X, t, 0, w1f, b1, edges[2, t])
        _edge_conv1(xp, Y, X, t, last, w1f, b1, edges[3, t])

    for i in range(32):
        for j in range(32):
            if 0 < i < 31 and 0 < j < 31:
                continue
            for k in range(C1):
                best = 0.0
                bi = -1
                for d in range(4):
                    ty = 2 * i + (d >> 1)
                    tx = 2 * j + (d & 1)
                    if ty == 0:
                        v = edges[0, tx, k]
                    elif ty == last:
                        v = edges[1, tx, k]
                    elif tx == 0:
                        v = edges[2, ty, k]
                    elif tx == last:
                        v = edges[3, ty, k]
                    else:
                        v = z1[Y + ty, X + tx, k]
                    if v > best:
                        best = v
                        bi = d
                t_a1p[i + 1, j + 1, k] = best
                r_idx1[i, j, k] = bi

    for i in range(32):
        for j in range(32):
            if 1 < i < 30 and 1 < j < 30:
                continue
            _conv2_at(t_a1p, i, j, w2f, b2, t_z2[i, j])


@_jit
def pool2_tile(z2, PY, PX, t_z2, a2, idx2):
    """Second pool of a tile: border cells from ``t_z2``, the rest shared."""
    for py in range(16):
        border = py == 0 or py == 15
        for px in range(16):
            if border or px == 0 or px == 15:
                src = t_z2
                oy = 0
                ox = 0
            else:
                src = z2
                oy = PY
                ox = PX
            for o in range(C2):
                best = 0.0
                bi = -1
                for d in range(4):
                    v = src[oy + 2 * py + (d >> 1), ox + 2 * px + (d & 1), o]
                    if v > best:
                        best = v
                        bi = d
                a2[py, px, o] = best
                idx2[py, px, o] = bi


@_jit
def tile_backward(seed, idx2, idx1, PY, PX, r_idx1, w2s, w1k, ga1p, gxp):
    """Signed d(logit)/d(input) of one 64x64 tile into padded ``gxp``.

    ``seed`` is the head row of the chosen class, ``w2s`` conv2 as
    (16, 3, 24) = [out, dy, dx * 8 + in] and ``w1k`` conv1 as (8, 3, 3).
    First-pool argmax codes come from ``r_idx1`` on the tile's border cells
    and from the shared ``idx1`` (offset by PY, PX) elsewhere.
    """
    ga1p[:] = 0.0
    gxp[:] = 0.0
    ga1f = ga1p.reshape(ga1p.shape[0], ga1p.shape[1] * C1)
    for py in range(16):
        for px in range(16):
            for o in range(C2):
                d = idx2[py, px, o]
                if d < 0:
                    continue
                g = seed[py, px, o]
                y = 2 * py + (d >> 1)
                base = (2 * px + (d & 1)) * C1
                for dy in range(3):
                    row = ga1f[y + dy]
                    wr = w2s[o, dy]
                    for k in range(24):
                        row[base + k] += g * wr[k]
    for py in range(32):
        border = py == 0 or py == 31
        for px in range(32):
            if border or px == 0 or px == 31:
                codes = r_idx1[py, px]
            else:
                codes = idx1[PY + py, PX + px]
            for k in range(C1):
                d = codes[k]
                if d < 0:
                    continue
                g = ga1p[py + 1, px + 1, k]
                y = 2 * py + (d >> 1)
                x = 2 * px + (d & 1)
                for dy in range(3):
                    for dx in range(3):
                        gxp[y + dy, x + dx] += g * w1k[k, dy, dx]


@_jit
def full_forward(xp, w1f, b1, w2f, b2, z1, a1p, idx1, z2):
    conv1_full(xp, w1f, b1, z1)
    relu_pool(z1, a1p, idx1)
    conv2_full(a1p, w2f, b2, z2)


@_jit
def alloc_full(H, W):
    """Scratch for the shared pass over an H x W raster."""
    z1 = np.empty((H, W, C1))
    a1p = np.zeros((H // 2 + 2, W // 2 + 2, C1))
    idx1 = np.empty((H // 2, W // 2, C1), np.int8)
    z2 = np.empty((H // 2, W // 2, C2))
    return z1, a1p, idx1, z2


@_jit
def tiles_logits(xp, tiles, w1f, b1, w2f, b2, fcw, fcb, z1, a1p, idx1, z2, out):
    """Logits of every tile origin in ``tiles`` (n, 2) over padded raster ``xp``."""
    full_forward(xp, w1f, b1, w2f, b2, z1, a1p, idx1, z2)
    t_a1p = np.zeros((34, 34, C1))
    r_idx1 = np.empty((32, 32, C1), np.int8)
    t_z2 = np.empty((32, 32, C2))
    edges = np.empty((4, PATCH, C1))
    a2 = np.empty((16, 16, C2))
    idx2 = np.empty((16, 16, C2), np.int8)
    for t in range(tiles.shape[0]):
        Y = tiles[t, 0]
        X = tiles[t, 1]
        assemble_tile(Y, X, xp, z1, a1p, idx1, w1f, b1, w2f, b2,
                      t_a1p, r_idx1, t_z2, edges)
        pool2_tile(z2, Y // 2, X // 2, t_z2, a2, idx2)
        head(a2, fcw, fcb, out[t])


@_jit
def tiles_abs_gradient(xp, tiles, classes, w1f, b1, w2f, b2, w2s, w1k, fcw,
                       z1, a1p, idx1, z2, acc):
    """Add |d logit_c / d x| of every tile into ``acc`` at the tile's position."""
    full_forward(xp, w1f, b1, w2f, b2, z1, a1p, idx1, z2)
    t_a1p = np.zeros((34, 34, C1))
    r_idx1 = np.empty((32, 32, C1), np.int8)
    t_z2 = np.empty((32, 32, C2))
    edges = np.empty((4, PATCH, C1))
    a2 = np.empty((16, 16, C2))
    idx2 = np.empty((16, 16, C2), np.int8)
    ga1p = np.empty((34, 34, C1))
    gxp = np.empty((PATCH + 2, PATCH + 2))
    for t in range(tiles.shape[0]):
        Y = tiles[t, 0]
        X = tiles[t, 1]
        assemble_tile(Y, X, xp, z1, a1p, idx1, w1f, b1, w2f, b2,
                      t_a1p, r_idx1, t_z2, edges)
        pool2_tile(z2, Y // 2, X // 2, t_z2, a2, idx2)
        tile_backward(fcw[classes[t]], idx2, idx1, Y // 2, X // 2, r_idx1,
                      w2s, w1k, ga1p, gxp)
        for i in range(PATCH):
            for j in range(PATCH):
                acc[Y + i, X + j] += abs(gxp[i + 1, j + 1])


@_jit
def patch_gradient(xp, c, w1f, b1, w2f, b2, w2s, w1k, fcw, out):
    """Signed gradient of logit ``c`` for one zero-padded 66x66 patch."""
    z1, a1p, idx1, z2 = alloc_full(PATCH, PATCH)
    full_forward(xp, w1f, b1, w2f, b2, z1, a1p, idx1, z2)
    a2 = np.empty((16, 16, C2))
    idx2 = np.empty((16, 16, C2), np.int8)
    ga1p = np.empty((34, 34, C1))
    gxp = np.empty((PATCH + 2, PATCH + 2))
    pool2(z2, a2, idx2)
    tile_backward(fcw[c], idx2, idx1, 0, 0, idx1, w2s, w1k, ga1p, gxp)
    out[:] = gxp[1:PATCH + 1, 1:PATCH + 1]


@_jit
def patch_logits(xb, w1f, b1, w2f, b2, fcw, fcb, out):
    """Logits of a stack of standalone patches ``xb`` (n, 64, 64)."""
    z1, a1p, idx1, z2 = alloc_full(PATCH, PATCH)
    a2 = np.empty((16, 16, C2))
    idx2 = np.empty((16, 16, C2), np.int8)
    xp = np.zeros((PATCH + 2, PATCH + 2))
    for b in range(xb.shape[0]):
        xp[1:PATCH + 1, 1:PATCH + 1] = xb[b]
        full_forward(xp, w1f, b1, w2f, b2, z1, a1p, idx1, z2)
        pool2(z2, a2, idx2)
        head(a2, fcw, fcb, out[b])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
@_jit
def batch_grads(xb, labels, w1f, b1, w2f, b2, w2s, w1k, fcw, fcb,
                g_w1f, g_b1, g_w2s, g_b2, g_fcw, g_fcb):
    """Accumulate softmax cross-entropy gradients of a batch; returns summed loss.

    Gradients land in the flattened layouts (``g_w1f`` (9, 8), ``g_w2s``
    (16, 3, 24)); callers reshape them back.
    """
    z1, a1p, idx1, z2 = alloc_full(PATCH, PATCH)
    a2 = np.empty((16, 16, C2))
    idx2 = np.empty((16, 16, C2), np.int8)
    logits = np.empty(N_CLASSES)
    prob = np.empty(N_CLASSES)
    ga2 = np.empty((16, 16, C2))
    ga1p = np.empty((34, 34, C1))
    xp = np.zeros((PATCH + 2, PATCH + 2))
    a1f = a1p.reshape(34, 34 * C1)
    ga1f = ga1p.reshape(34, 34 * C1)
    total = 0.0
    for b in range(xb.shape[0]):
        xp[1:PATCH + 1, 1:PATCH + 1] = xb[b]
        full_forward(xp, w1f, b1, w2f, b2, z1, a1p, idx1, z2)
        pool2(z2, a2, idx2)
        head(a2, fcw, fcb, logits)

        m = logits.max()
        s = 0.0
        for c in range(N_CLASSES):
            prob[c] = np.exp(logits[c] - m)
            s += prob[c]
        for c in range(N_CLASSES):
            prob[c] /= s
        y = labels[b]
        total += np.log(s) - (logits[y] - m)
        prob[y] -= 1.0  # now dL/dlogits

        ga2[:] = 0.0
        for c in range(N_CLASSES):
            g = prob[c]
            g_fcb[c] += g
            for py in range(16):
                for px in range(16):
                    for o in range(C2):
                        g_fcw[c, py, px, o] += g * a2[py, px, o]
                        ga2[py, px, o] += g * fcw[c, py, px, o]

        ga1p[:] = 0.0
        for py in range(16):
            for px in range(16):
                for o in range(C2):
                    d = idx2[py, px, o]
                    if d < 0:
                        continue
                    g = ga2[py, px, o]
                    y2 = 2 * py + (d >> 1)
                    base = (2 * px + (d & 1)) * C1
                    g_b2[o] += g
                    for dy in range(3):
                        arow = a1f[y2 + dy]
                        grow = ga1f[y2 + dy]
                        wr = w2s[o, dy]
                        gw = g_w2s[o, dy]
                        for k in range(24):
                            gw[k] += g * arow[base + k]
                            grow[base + k] += g * wr[k]

        for py in range(32):
            for px in range(32):
                for k in range(C1):
                    d = idx1[py, px, k]
                    if d < 0:
                        continue
                    g = ga1p[py + 1, px + 1, k]
                    y1 = 2 * py + (d >> 1)
                    x1 = 2 * px + (d & 1)
                    g_b1[k] += g
                    for dy in range(3):
                        for dx in range(3):
                            g_w1f[dy * 3 + dx, k] += g * xp[y1 + dy, x1 + dx]
    return total
