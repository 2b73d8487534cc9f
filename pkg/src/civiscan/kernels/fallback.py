"""Pure-NumPy implementations of the hot kernels.

Used whenever the compiled extension is unavailable (or forced via
CIVISCAN_KERNELS=fallback). Semantics here are the reference: the native
module must match these outputs within floating-point reassociation noise,
and exactly for integer outputs (pool argmax routing, component labels).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, w, b, stride, pad):
    """Cross-correlate a batch of feature maps with a filter bank.

    x: (batch, h, w, cin), w: (kh, kw, cin, cout), b: (cout,).
    Zero padding of `pad` on both spatial sides, square stride.
    """
    bsz, h, wd, _ = x.shape
    kh, kw, _, cout = w.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    y = np.empty((bsz, oh, ow, cout), dtype=x.dtype)
    y[:] = b
    for i in range(kh):
        for j in range(kw):
            xs = x[:, i : i + oh * stride : stride, j : j + ow * stride : stride, :]
            y += xs @ w[i, j]
    return y


def conv2d_backward(x, w, stride, pad, dout):
    """Gradients of conv2d_forward w.r.t. input, weights, and bias."""
    bsz, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    oh, ow = dout.shape[1], dout.shape[2]
    db = dout.sum(axis=(0, 1, 2))
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp)
    dmat = dout.reshape(-1, cout)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, i : i + oh * stride : stride, j : j + ow * stride : stride, :]
            dw[i, j] = xs.reshape(-1, cin).T @ dmat
            dxp[:, i : i + oh * stride : stride, j : j + ow * stride : stride, :] += dout @ w[i, j].T
    dx = dxp[:, pad : pad + h, pad : pad + wd, :] if pad else dxp
    return dx, dw, db


def maxpool_forward(x, window, stride):
    """Max pooling; returns the pooled map and the in-window argmax.

    Ties route to the first maximum in row-major window order, matching the
    native kernel.
    """
    bsz, h, wd, c = x.shape
    oh = (h - window) // stride + 1
    ow = (wd - window) // stride + 1
    win = sliding_window_view(x, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    flat = np.ascontiguousarray(win).reshape(bsz, oh, ow, c, window * window)
    arg = flat.argmax(axis=4).astype(np.int32)
    y = np.take_along_axis(flat, arg[..., None].astype(np.int64), axis=4)[..., 0]
    return y, arg


def maxpool_backward(dout, arg, x_shape, window, stride):
    """Scatter pooled gradients back to the argmax positions."""
    bsz, h, wd, c = x_shape
    oh, ow = dout.shape[1], dout.shape[2]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    oy = np.arange(oh)[None, :, None, None]
    ox = np.arange(ow)[None, None, :, None]
    rows = oy * stride + arg // window
    cols = ox * stride + arg % window
    bi = np.arange(bsz)[:, None, None, None]
    ci = np.arange(c)[None, None, None, :]
    np.add.at(dx, (bi, rows, cols, ci), dout)
    return dx


def blur_separable(img, taps):
    """Separable correlation of an HWC image with a 1-D tap vector.

    Horizontal pass then vertical pass, border handled by edge replication.
    Taps are accumulated in ascending index order on both passes.
    """
    taps = np.asarray(taps, dtype=img.dtype)
    r = len(taps) // 2
    h, w = img.shape[:2]

    xp = np.pad(img, ((0, 0), (r, r), (0, 0)), mode="edge")
    out = taps[0] * xp[:, 0:w, :]
    for t in range(1, len(taps)):
        out += taps[t] * xp[:, t : t + w, :]

    yp = np.pad(out, ((r, r), (0, 0), (0, 0)), mode="edge")
    out = taps[0] * yp[0:h, :, :]
    for t in range(1, len(taps)):
        out += taps[t] * yp[t : t + h, :, :]
    return out


def bilinear_resize(img, out_h, out_w):
    """Bilinear resample of an HWC image using half-pixel sample centers.

    Source coordinate for output index i is (i + 0.5) * scale - 0.5, clamped
    to the valid range; interpolation uses the c0 + f*(c1-c0) form so
    constant inputs are reproduced exactly.
    """
    h, w = img.shape[:2]
    fy = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, float(h - 1))
    fx = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, float(w - 1))
    y0 = fy.astype(np.int64)
    x0 = fx.astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (fy - y0).astype(img.dtype)[:, None, None]
    wx = (fx - x0).astype(img.dtype)[None, :, None]

    r0 = img[y0]
    r1 = img[y1]
    top = r0[:, x0, :] + wx * (r0[:, x1, :] - r0[:, x0, :])
    bot = r1[:, x0, :] + wx * (r1[:, x1, :] - r1[:, x0, :])
    return top + wy * (bot - top)


def label_components(mask):
    """4-connected component labeling of a boolean mask.

    Returns (labels, count) where labels is int32, 0 is background, and
    component ids 1..count are assigned in row-major order of each
    component's first pixel.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    parent: list[int] = [0]

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    prev_runs: list[tuple[int, int, int]] = []
    next_label = 1
    padded = np.zeros(w + 2, dtype=np.int8)
    for y in range(h):
        padded[1:-1] = mask[y]
        edges = np.flatnonzero(np.diff(padded))
        starts = edges[0::2]
        ends = edges[1::2]
        runs = []
        pi = 0
        for s, e in zip(starts, ends):
            lab = 0
            while pi < len(prev_runs) and prev_runs[pi][1] <= s:
                pi += 1
            pj = pi
            while pj < len(prev_runs) and prev_runs[pj][0] < e:
                other = find(prev_runs[pj][2])
                if lab == 0:
                    lab = other
                elif other != lab:
                    parent[other] = find(lab)
                pj += 1
            if lab == 0:
                parent.append(next_label)
                lab = next_label
                next_label += 1
            labels[y, s:e] = lab
            runs.append((int(s), int(e), lab))
        prev_runs = runs

    if next_label == 1:
        return labels, 0

    roots = np.array([find(i) for i in range(next_label)], dtype=np.int32)
    flat = roots[labels.ravel()]
    nz = flat[flat != 0]
    uniq, first = np.unique(nz, return_index=True)
    canon = np.zeros(next_label, dtype=np.int32)
    canon[uniq[np.argsort(first)]] = np.arange(1, len(uniq) + 1, dtype=np.int32)
    return canon[flat].reshape(h, w), int(len(uniq))
