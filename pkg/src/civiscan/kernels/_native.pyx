# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot kernels.

Semantics mirror civiscan.kernels.fallback exactly: same padding, same
tie-break conventions, same tap accumulation order. Float results may
differ from the fallback by reassociation noise only.
"""

import numpy as np
cimport cython

ctypedef fused floatT:
    float
    double


# --- convolution -------------------------------------------------------------

def conv2d_forward(x, w, b, int stride, int pad):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    b = np.ascontiguousarray(b)
    return _conv_fwd(x, w, b, stride, pad)


def _conv_fwd(floatT[:, :, :, ::1] x, floatT[:, :, :, ::1] w, floatT[::1] b,
              int stride, int pad):
    cdef Py_ssize_t bsz = x.shape[0], h = x.shape[1], wd = x.shape[2], cin = x.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], cout = w.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (wd + 2 * pad - kw) // stride + 1
    dtype = np.float64 if floatT is double else np.float32
    out = np.empty((bsz, oh, ow, cout), dtype=dtype)
    cdef floatT[:, :, :, ::1] y = out
    cdef Py_ssize_t n, oy, ox, i, j, ci, co, iy, ix
    cdef floatT xv
    for n in range(bsz):
        for oy in range(oh):
            for ox in range(ow):
                for co in range(cout):
                    y[n, oy, ox, co] = b[co]
                for i in range(kh):
                    iy = oy * stride + i - pad
                    if iy < 0 or iy >= h:
                        continue
                    for j in range(kw):
                        ix = ox * stride + j - pad
                        if ix < 0 or ix >= wd:
                            continue
                        for ci in range(cin):
                            xv = x[n, iy, ix, ci]
                            for co in range(cout):
                                y[n, oy, ox, co] += xv * w[i, j, ci, co]
    return out


def conv2d_backward(x, w, int stride, int pad, dout):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    dout = np.ascontiguousarray(dout)
    return _conv_bwd(x, w, stride, pad, dout)


def _conv_bwd(floatT[:, :, :, ::1] x, floatT[:, :, :, ::1] w,
              int stride, int pad, floatT[:, :, :, ::1] dout):
    cdef Py_ssize_t bsz = x.shape[0], h = x.shape[1], wd = x.shape[2], cin = x.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], cout = w.shape[3]
    cdef Py_ssize_t oh = dout.shape[1], ow = dout.shape[2]
    dtype = np.float64 if floatT is double else np.float32
    dx_arr = np.zeros((bsz, h, wd, cin), dtype=dtype)
    dw_arr = np.zeros((kh, kw, cin, cout), dtype=dtype)
    db_arr = np.zeros(cout, dtype=dtype)
    cdef floatT[:, :, :, ::1] dx = dx_arr
    cdef floatT[:, :, :, ::1] dw = dw_arr
    cdef floatT[::1] db = db_arr
    cdef Py_ssize_t n, oy, ox, i, j, ci, co, iy, ix
    cdef floatT g, xv, acc
    for n in range(bsz):
        for oy in range(oh):
            for ox in range(ow):
                for co in range(cout):
                    db[co] += dout[n, oy, ox, co]
                for i in range(kh):
                    iy = oy * stride + i - pad
                    if iy < 0 or iy >= h:
                        continue
                    for j in range(kw):
                        ix = ox * stride + j - pad
                        if ix < 0 or ix >= wd:
                            continue
                        for ci in range(cin):
                            xv = x[n, iy, ix, ci]
                            acc = 0
                            for co in range(cout):
                                g = dout[n, oy, ox, co]
                                dw[i, j, ci, co] += xv * g
                                acc += w[i, j, ci, co] * g
                            dx[n, iy, ix, ci] += acc
    return dx_arr, dw_arr, db_arr


# --- max pooling --------------------------------------------------------------

def maxpool_forward(x, int window, int stride):
    x = np.ascontiguousarray(x)
    return _pool_fwd(x, window, stride)


def _pool_fwd(floatT[:, :, :, ::1] x, int window, int stride):
    cdef Py_ssize_t bsz = x.shape[0], h = x.shape[1], wd = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t oh = (h - window) // stride + 1
    cdef Py_ssize_t ow = (wd - window) // stride + 1
    dtype = np.float64 if floatT is double else np.float32
    out = np.empty((bsz, oh, ow, c), dtype=dtype)
    arg = np.zeros((bsz, oh, ow, c), dtype=np.int32)
    cdef floatT[:, :, :, ::1] y = out
    cdef int[:, :, :, ::1] a = arg
    cdef Py_ssize_t n, oy, ox, ch, wi, wj
    cdef floatT best, v
    cdef int bi
    for n in range(bsz):
        for oy in range(oh):
            for ox in range(ow):
                for ch in range(c):
                    best = x[n, oy * stride, ox * stride, ch]
                    bi = 0
                    for wi in range(window):
                        for wj in range(window):
                            v = x[n, oy * stride + wi, ox * stride + wj, ch]
                            if v > best:
                                best = v
                                bi = wi * window + wj
                    y[n, oy, ox, ch] = best
                    a[n, oy, ox, ch] = bi
    return out, arg


def maxpool_backward(dout, arg, x_shape, int window, int stride):
    dout = np.ascontiguousarray(dout)
    arg = np.ascontiguousarray(arg, dtype=np.int32)
    return _pool_bwd(dout, arg, x_shape[0], x_shape[1], x_shape[2], x_shape[3], window, stride)


def _pool_bwd(floatT[:, :, :, ::1] dout, int[:, :, :, ::1] arg,
              Py_ssize_t bsz, Py_ssize_t h, Py_ssize_t wd, Py_ssize_t c,
              int window, int stride):
    dtype = np.float64 if floatT is double else np.float32
    dx_arr = np.zeros((bsz, h, wd, c), dtype=dtype)
    cdef floatT[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t oh = dout.shape[1], ow = dout.shape[2]
    cdef Py_ssize_t n, oy, ox, ch
    cdef int bi
    for n in range(bsz):
        for oy in range(oh):
            for ox in range(ow):
                for ch in range(c):
                    bi = arg[n, oy, ox, ch]
                    dx[n, oy * stride + bi // window, ox * stride + bi % window, ch] += dout[n, oy, ox, ch]
    return dx_arr


# --- separable blur -------------------------------------------------------------

def blur_separable(img, taps):
    img = np.ascontiguousarray(img)
    taps = np.ascontiguousarray(taps, dtype=img.dtype)
    return _blur(img, taps)


def _blur(floatT[:, :, ::1] img, floatT[::1] taps):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], c = img.shape[2]
    cdef Py_ssize_t nt = taps.shape[0]
    cdef Py_ssize_t r = nt // 2
    dtype = np.float64 if floatT is double else np.float32
    tmp_arr = np.empty((h, w, c), dtype=dtype)
    out_arr = np.empty((h, w, c), dtype=dtype)
    cdef floatT[:, :, ::1] tmp = tmp_arr
    cdef floatT[:, :, ::1] out = out_arr
    cdef Py_ssize_t y, x, ch, t, xx, yy
    cdef floatT acc
    for y in range(h):
        for x in range(w):
            for ch in range(c):
                acc = 0
                for t in range(nt):
                    xx = x + t - r
                    if xx < 0:
                        xx = 0
                    elif xx >= w:
                        xx = w - 1
                    acc += taps[t] * img[y, xx, ch]
                tmp[y, x, ch] = acc
    for y in range(h):
        for x in range(w):
            for ch in range(c):
                acc = 0
                for t in range(nt):
                    yy = y + t - r
                    if yy < 0:
                        yy = 0
                    elif yy >= h:
                        yy = h - 1
                    acc += taps[t] * tmp[yy, x, ch]
                out[y, x, ch] = acc
    return out_arr


# --- bilinear resize -------------------------------------------------------------

def bilinear_resize(img, Py_ssize_t out_h, Py_ssize_t out_w):
    img = np.ascontiguousarray(img)
    return _resize(img, out_h, out_w)


def _resize(floatT[:, :, ::1] img, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], c = img.shape[2]
    dtype = np.float64 if floatT is double else np.float32
    out_arr = np.empty((out_h, out_w, c), dtype=dtype)
    cdef floatT[:, :, ::1] out = out_arr
    cdef double sy = <double> h / <double> out_h
    cdef double sx = <double> w / <double> out_w
    cdef Py_ssize_t oy, ox, ch, y0, x0, y1, x1
    cdef double fy, fx
    cdef floatT wy, wx, top, bot
    for oy in range(out_h):
        fy = (oy + 0.5) * sy - 0.5
        if fy < 0.0:
            fy = 0.0
        elif fy > h - 1.0:
            fy = h - 1.0
        y0 = <Py_ssize_t> fy
        y1 = y0 + 1 if y0 + 1 < h else h - 1
        wy = <floatT> (fy - y0)
        for ox in range(out_w):
            fx = (ox + 0.5) * sx - 0.5
            if fx < 0.0:
                fx = 0.0
            elif fx > w - 1.0:
                fx = w - 1.0
            x0 = <Py_ssize_t> fx
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            wx = <floatT> (fx - x0)
            for ch in range(c):
                top = img[y0, x0, ch] + wx * (img[y0, x1, ch] - img[y0, x0, ch])
                bot = img[y1, x0, ch] + wx * (img[y1, x1, ch] - img[y1, x0, ch])
                out[oy, ox, ch] = top + wy * (bot - top)
    return out_arr


# --- connected components ---------------------------------------------------------

def label_components(mask):
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    return _label(mask)


def _label(unsigned char[:, ::1] mask):
    cdef Py_ssize_t h = mask.shape[0], w = mask.shape[1]
    labels_arr = np.zeros((h, w), dtype=np.int32)
    cdef int[:, ::1] labels = labels_arr
    parent_arr = np.zeros(h * w // 2 + 2, dtype=np.int32)
    cdef int[::1] parent = parent_arr
    cdef int next_label = 1
    cdef Py_ssize_t y, x
    cdef int west, north, rw, rn, a

    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            west = labels[y, x - 1] if x > 0 else 0
            north = labels[y - 1, x] if y > 0 else 0
            if west and north:
                rw = west
                while parent[rw] != rw:
                    rw = parent[rw]
                rn = north
                while parent[rn] != rn:
                    rn = parent[rn]
                if rw != rn:
                    parent[rn] = rw
                labels[y, x] = rw
            elif west:
                labels[y, x] = west
            elif north:
                labels[y, x] = north
            else:
                parent[next_label] = next_label
                labels[y, x] = next_label
                next_label += 1

    canon_arr = np.zeros(next_label, dtype=np.int32)
    cdef int[::1] canon = canon_arr
    cdef int count = 0, root
    for y in range(h):
        for x in range(w):
            a = labels[y, x]
            if a == 0:
                continue
            root = a
            while parent[root] != root:
                root = parent[root]
            if canon[root] == 0:
                count += 1
                canon[root] = count
            labels[y, x] = canon[root]
    return labels_arr, count
