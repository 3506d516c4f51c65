"""Pure-numpy versions of the compiled kernels.

Same signatures and results as ``_ckernels``; slower, always available.
"""
import numpy as np


def im2col(x, kh, kw, stride, pad_h, pad_w):
    n, c, h, w = x.shape
    oh = (h + 2 * pad_h - kh) // stride + 1
    ow = (w + 2 * pad_w - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def col2im(cols, c, h, w, kh, kw, stride, pad_h, pad_w):
    n = cols.shape[0]
    oh = (h + 2 * pad_h - kh) // stride + 1
    ow = (w + 2 * pad_w - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad_h, w + 2 * pad_w), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return np.ascontiguousarray(xp[:, :, pad_h:pad_h + h, pad_w:pad_w + w])


def depthwise_forward(x, k):
    n, c, h, w = x.shape
    kh, kw = k.shape[1:]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    y = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            y += k[None, :, i, j, None, None] * xp[:, :, i:i + h, j:j + w]
    return y


def depthwise_backward(x, k, gy):
    n, c, h, w = x.shape
    kh, kw = k.shape[1:]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    gxp = np.zeros_like(xp)
    gk = np.zeros_like(k)
    for i in range(kh):
        for j in range(kw):
            gk[:, i, j] = np.einsum("nchw,nchw->c", gy, xp[:, :, i:i + h, j:j + w])
            gxp[:, :, i:i + h, j:j + w] += k[None, :, i, j, None, None] * gy
    return np.ascontiguousarray(gxp[:, :, ph:ph + h, pw:pw + w]), gk


def maxpool2x2_forward(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first occurrence, i.e. row-major tie rule
    idx = win.argmax(axis=-1).astype(np.uint8)
    y = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2x2_backward(gy, idx):
    n, c, oh, ow = gy.shape
    onehot = idx[..., None] == np.arange(4, dtype=np.uint8)
    g = np.where(onehot, gy[..., None], 0).astype(gy.dtype)
    g = g.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(g.reshape(n, c, 2 * oh, 2 * ow))


def _softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def mish_forward(x):
    xd = x.astype(np.float64)
    return (xd * np.tanh(_softplus(xd))).astype(x.dtype)


def mish_backward(x, gy):
    xd = x.astype(np.float64)
    t = np.tanh(_softplus(xd))
    return (gy * (t + xd * (1.0 - t * t) * _sigmoid(xd))).astype(x.dtype)
