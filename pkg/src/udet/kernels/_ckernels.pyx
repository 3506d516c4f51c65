# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the convolution, pooling and Mish kernels.

Every function mirrors one in ``_pykernels`` with identical signature and
results; ``udet.kernels`` picks whichever is importable.
"""
import numpy as np

from libc.math cimport exp

ctypedef fused real:
    float
    double


def im2col(const real[:, :, :, ::1] x, int kh, int kw, int stride,
           int pad_h, int pad_w):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad_h - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad_w - kw) // stride + 1
    out = np.zeros((n, c * kh * kw, oh * ow), dtype=np.asarray(x).dtype)
    cdef real[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, row, oy, ox, iy, base, ox0, ox1, shift
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    # valid output columns: 0 <= ox*stride - pad_w + j < w
                    ox0 = _ceil_div(pad_w - j, stride)
                    ox1 = _ceil_div(w + pad_w - j, stride)
                    ox0 = max(ox0, 0)
                    ox1 = min(ox1, ow)
                    shift = j - pad_w
                    for oy in range(oh):
                        iy = oy * stride - pad_h + i
                        if iy < 0 or iy >= h:
                            continue
                        base = oy * ow
                        if stride == 1:
                            for ox in range(ox0, ox1):
                                cols[b, row, base + ox] = x[b, ch, iy, ox + shift]
                        else:
                            for ox in range(ox0, ox1):
                                cols[b, row, base + ox] = x[b, ch, iy, ox * stride + shift]
    return out


def col2im(const real[:, :, ::1] cols, int c, int h, int w, int kh, int kw,
           int stride, int pad_h, int pad_w):
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t oh = (h + 2 * pad_h - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad_w - kw) // stride + 1
    out = np.zeros((n, c, h, w), dtype=np.asarray(cols).dtype)
    cdef real[:, :, :, ::1] x = out
    cdef Py_ssize_t b, ch, i, j, row, oy, ox, iy, base, ox0, ox1, shift
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    ox0 = max(_ceil_div(pad_w - j, stride), 0)
                    ox1 = min(_ceil_div(w + pad_w - j, stride), ow)
                    shift = j - pad_w
                    for oy in range(oh):
                        iy = oy * stride - pad_h + i
                        if iy < 0 or iy >= h:
                            continue
                        base = oy * ow
                        for ox in range(ox0, ox1):
                            x[b, ch, iy, ox * stride + shift] += cols[b, row, base + ox]
    return out


cdef inline Py_ssize_t _ceil_div(Py_ssize_t a, Py_ssize_t b) nogil:
    # b > 0; floor-correct for negative a
    if a <= 0:
        return -((-a) // b)
    return (a + b - 1) // b


def depthwise_forward(const real[:, :, :, ::1] x, const real[:, :, ::1] k):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t kh = k.shape[1], kw = k.shape[2]
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    out = np.zeros((n, c, h, w), dtype=np.asarray(x).dtype)
    cdef real[:, :, :, ::1] y = out
    cdef Py_ssize_t b, ch, i, j, yy, xx, y0, y1, x0, x1
    cdef real kv
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                y0 = max(0, ph - i)
                y1 = min(h, h + ph - i)
                for j in range(kw):
                    kv = k[ch, i, j]
                    x0 = max(0, pw - j)
                    x1 = min(w, w + pw - j)
                    for yy in range(y0, y1):
                        for xx in range(x0, x1):
                            y[b, ch, yy, xx] += kv * x[b, ch, yy + i - ph, xx + j - pw]
    return out


def depthwise_backward(const real[:, :, :, ::1] x, const real[:, :, ::1] k,
                       const real[:, :, :, ::1] gy):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t kh = k.shape[1], kw = k.shape[2]
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    dtype = np.asarray(x).dtype
    gx_arr = np.zeros((n, c, h, w), dtype=dtype)
    gk_arr = np.zeros((c, kh, kw), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef real[:, :, ::1] gk = gk_arr
    cdef Py_ssize_t b, ch, i, j, yy, xx, y0, y1, x0, x1
    cdef real kv, g, acc
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                y0 = max(0, ph - i)
                y1 = min(h, h + ph - i)
                for j in range(kw):
                    kv = k[ch, i, j]
                    x0 = max(0, pw - j)
                    x1 = min(w, w + pw - j)
                    acc = 0
                    for yy in range(y0, y1):
                        for xx in range(x0, x1):
                            g = gy[b, ch, yy, xx]
                            acc = acc + g * x[b, ch, yy + i - ph, xx + j - pw]
                            gx[b, ch, yy + i - ph, xx + j - pw] += kv * g
                    gk[ch, i, j] += acc
    return gx_arr, gk_arr


def maxpool2x2_forward(const real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = h // 2, ow = w // 2
    out = np.empty((n, c, oh, ow), dtype=np.asarray(x).dtype)
    idx_arr = np.empty((n, c, oh, ow), dtype=np.uint8)
    cdef real[:, :, :, ::1] y = out
    cdef unsigned char[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ch, oy, ox
    cdef real best, v
    cdef unsigned char arg
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    # strict '>' keeps the first (row-major) maximum on ties
                    best = x[b, ch, 2 * oy, 2 * ox]
                    arg = 0
                    v = x[b, ch, 2 * oy, 2 * ox + 1]
                    if v > best:
                        best = v
                        arg = 1
                    v = x[b, ch, 2 * oy + 1, 2 * ox]
                    if v > best:
                        best = v
                        arg = 2
                    v = x[b, ch, 2 * oy + 1, 2 * ox + 1]
                    if v > best:
                        best = v
                        arg = 3
                    y[b, ch, oy, ox] = best
                    idx[b, ch, oy, ox] = arg
    return out, idx_arr


def maxpool2x2_backward(const real[:, :, :, ::1] gy, const unsigned char[:, :, :, ::1] idx):
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], oh = gy.shape[2], ow = gy.shape[3]
    out = np.zeros((n, c, 2 * oh, 2 * ow), dtype=np.asarray(gy).dtype)
    cdef real[:, :, :, ::1] gx = out
    cdef Py_ssize_t b, ch, oy, ox
    cdef unsigned char a
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    a = idx[b, ch, oy, ox]
                    gx[b, ch, 2 * oy + (a >> 1), 2 * ox + (a & 1)] = gy[b, ch, oy, ox]
    return out


# tanh(softplus(v)) == q / (q + 2) with q = e^v (e^v + 2); one exp per element.
# Beyond v = 20 the ratio is 1 to double precision and e^(2v) would overflow.

def mish_forward(const real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n, dtype=np.asarray(x).dtype)
    cdef real[::1] y = out
    cdef double v, e, q
    for i in range(n):
        v = x[i]
        if v > 20.0:
            y[i] = <real>v
        else:
            e = exp(v)
            q = e * (e + 2.0)
            # t <= 1 after rounding, so the product never exceeds v
            y[i] = <real>(v * (q / (q + 2.0)))
    return out


def mish_backward(const real[::1] x, const real[::1] gy):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n, dtype=np.asarray(x).dtype)
    cdef real[::1] gx = out
    cdef double v, e, q, t, sig
    for i in range(n):
        v = x[i]
        if v > 20.0:
            gx[i] = gy[i]
            continue
        e = exp(v)
        q = e * (e + 2.0)
        t = q / (q + 2.0)
        sig = e / (1.0 + e)
        gx[i] = <real>(gy[i] * (t + v * (1.0 - t * t) * sig))
    return out
