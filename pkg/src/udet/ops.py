"""Differentiable neural-network primitives on NCHW tensors.

Convolutions are cross-correlations (no kernel flip). The heavy loops
(im2col, depthwise conv, 2x2 max-pooling, Mish) run in :mod:`udet.kernels`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from . import kernels
from .tensor import Tensor, note_branch, record

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with a primitive."""


def _need4(op: str, x: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected a rank-4 (N,C,H,W) tensor, got shape {x.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, d in enumerate(shape):
        if d == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def identity(x: Tensor) -> Tensor:
    return record("identity", (x,), x.data.copy(), lambda g, needs: (g,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return record("add", (a, b), a.data + b.data, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return record("sub", (a, b), a.data - b.data, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def bw(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return record("mul", (a, b), a.data * b.data, bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def bw(g, needs):
        return (np.broadcast_to(g.reshape(()), x.shape).astype(x.dtype),)

    return record("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1), bw)


def mean(x: Tensor) -> Tensor:
    n = x.size

    def bw(g, needs):
        return (np.full(x.shape, g.reshape(()) / n, dtype=x.dtype),)

    return record("mean", (x,), np.asarray(x.data.mean(), dtype=x.dtype).reshape(1, 1, 1, 1), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_branch(mask)
    return record("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype),
                  lambda g, needs: (g * mask,))


def softplus(x: Tensor) -> Tensor:
    d = x.data
    y = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))
    return record("softplus", (x,), y.astype(x.dtype),
                  lambda g, needs: (g * _sigmoid_np(d),))


def _sigmoid_np(d: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(d))
    return np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)
    return record("sigmoid", (x,), y, lambda g, needs: (g * y * (1 - y),))


def mish(x: Tensor) -> Tensor:
    """x * tanh(softplus(x))."""
    d = x.data
    y = kernels.mish_forward(d.reshape(-1)).reshape(d.shape)

    def bw(g, needs):
        g = np.ascontiguousarray(g, dtype=d.dtype)
        return (kernels.mish_backward(d.reshape(-1), g.reshape(-1)).reshape(d.shape),)

    return record("mish", (x,), y, bw)


ACTIVATIONS = {
    "mish": mish,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "identity": identity,
}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; choose from {sorted(ACTIVATIONS)}") from None
    return fn(x)


# ---------------------------------------------------------------- convolution

@dataclass(frozen=True)
class Conv2DSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3)
    stride: int = 1
    padding: Literal["same", "valid"] = "same"
    bias: bool = True

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels, *self.kernel)

    def parameter_count(self) -> int:
        kh, kw = self.kernel
        return kh * kw * self.in_channels * self.out_channels + (self.out_channels if self.bias else 0)

    def pads(self) -> tuple:
        if self.padding == "valid":
            return 0, 0
        kh, kw = self.kernel
        # 'same' pads (k-1)/2 on both sides; U-Det only uses odd kernels here
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("'same' padding needs odd kernel sizes")
        return kh // 2, kw // 2


def conv2d(x: Tensor, spec: Conv2DSpec, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    _need4("conv2d", x)
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"conv2d: input has {c} channels, spec expects {spec.in_channels} "
                         f"(input shape {x.shape}, weight shape {weight.shape})")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv2d: weight shape {weight.shape} != spec {spec.weight_shape}")
    if spec.bias and bias is None:
        raise ShapeError("conv2d: spec declares a bias but none was given")
    kh, kw = spec.kernel
    ph, pw = spec.pads()
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(f"conv2d: kernel {spec.kernel} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
    s = spec.stride
    oh = (h + 2 * ph - kh) // s + 1
    ow = (w + 2 * pw - kw) // s + 1
    o = spec.out_channels
    wmat = weight.data.reshape(o, -1)
    pointwise = kh == 1 and kw == 1 and s == 1
    if pointwise:
        cols = x.data.reshape(n, c, h * w)
    else:
        cols = kernels.im2col(x.data, kh, kw, s, ph, pw)
    y = np.matmul(wmat, cols)
    if bias is not None:
        y += bias.data.reshape(1, o, 1)
    y = y.reshape(n, o, oh, ow)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g, needs):
        g2 = np.ascontiguousarray(g).reshape(n, o, oh * ow)
        gx = gw = gb = None
        if needs[1]:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if len(needs) > 2 and needs[2]:
            gb = g2.sum(axis=(0, 2))
        if needs[0]:
            gcols = np.matmul(wmat.T, g2)
            if pointwise:
                gx = gcols.reshape(x.shape)
            else:
                gx = kernels.col2im(gcols, c, h, w, kh, kw, s, ph, pw)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return record("conv2d", inputs, y, bw)


def transposed_conv2d(x: Tensor, spec: Conv2DSpec, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """2x2 stride-2 up-convolution; weight shape (in, out, 2, 2).

    Windows never overlap at this kernel/stride pair, so the op is one GEMM
    followed by a pixel shuffle.
    """
    _need4("transposed_conv2d", x)
    if spec.kernel != (2, 2) or spec.stride != 2:
        raise ValueError("transposed_conv2d supports kernel 2x2 with stride 2 only")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"transposed_conv2d: input has {c} channels, spec expects {spec.in_channels}")
    o = spec.out_channels
    if weight.shape != (c, o, 2, 2):
        raise ShapeError(f"transposed_conv2d: weight shape {weight.shape} != {(c, o, 2, 2)}")
    wmat = weight.data.transpose(1, 2, 3, 0).reshape(o * 4, c)
    xm = x.data.reshape(n, c, h * w)
    t = np.matmul(wmat, xm).reshape(n, o, 2, 2, h, w)
    y = t.transpose(0, 1, 4, 2, 5, 3).reshape(n, o, 2 * h, 2 * w)
    if bias is not None:
        y = y + bias.data.reshape(1, o, 1, 1)
    y = np.ascontiguousarray(y)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g, needs):
        gt = g.reshape(n, o, h, 2, w, 2).transpose(0, 1, 3, 5, 2, 4).reshape(n, o * 4, h * w)
        gx = gw = gb = None
        if needs[0]:
            gx = np.matmul(wmat.T, gt).reshape(x.shape)
        if needs[1]:
            gwm = np.matmul(gt, xm.transpose(0, 2, 1)).sum(axis=0)
            gw = gwm.reshape(o, 2, 2, c).transpose(3, 0, 1, 2).copy()
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return record("transposed_conv2d", inputs, y, bw)


def depthwise_conv2d(x: Tensor, weight: Tensor) -> Tensor:
    """One 'same'-padded spatial filter per channel; weight shape (C, kh, kw)."""
    _need4("depthwise_conv2d", x)
    if weight.ndim != 3 or weight.shape[0] != x.shape[1]:
        raise ShapeError(f"depthwise_conv2d: {x.shape[1]} channels but filter bank shape {weight.shape}")
    if weight.shape[1] % 2 == 0 or weight.shape[2] % 2 == 0:
        raise ShapeError("depthwise_conv2d: kernel sizes must be odd")
    xd = x.data
    wd = np.ascontiguousarray(weight.data, dtype=xd.dtype)
    y = kernels.depthwise_forward(xd, wd)

    def bw(g, needs):
        gx, gw = kernels.depthwise_backward(xd, wd, np.ascontiguousarray(g, dtype=xd.dtype))
        return (gx if needs[0] else None, gw.astype(weight.dtype) if needs[1] else None)

    return record("depthwise_conv2d", (x, weight), y, bw)


# ---------------------------------------------------------------- resampling

def maxpool2d(x: Tensor) -> Tensor:
    """2x2 window, stride 2. Gradient goes to the first (row-major) maximum."""
    _need4("maxpool2d", x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2d: spatial dims must be even, got {x.shape[2:]}")
    y, idx = kernels.maxpool2x2_forward(x.data)
    note_branch(idx)

    def bw(g, needs):
        return (kernels.maxpool2x2_backward(np.ascontiguousarray(g, dtype=x.dtype), idx),)

    return record("maxpool2d", (x,), y, bw)


def upsample2x(x: Tensor) -> Tensor:
    _need4("upsample2x", x)
    n, c, h, w = x.shape
    y = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def bw(g, needs):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record("upsample2x", (x,), np.ascontiguousarray(y), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _need4("concat_channels", a)
    _need4("concat_channels", b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    y = np.concatenate([a.data, b.data], axis=1)

    def bw(g, needs):
        return (g[:, :ca] if needs[0] else None, g[:, ca:] if needs[1] else None)

    return record("concat_channels", (a, b), y, bw)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _need4("slice_channels", x)
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_channels: [{start}:{stop}] outside {x.shape[1]} channels")

    def bw(g, needs):
        out = np.zeros(x.shape, dtype=g.dtype)
        out[:, start:stop] = g
        return (out,)

    return record("slice_channels", (x,), x.data[:, start:stop].copy(), bw)


# ---------------------------------------------------------------- normalization / regularization

@dataclass
class BatchNormSpec:
    channels: int
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    def parameter_count(self) -> int:
        # gamma, beta, running mean, running variance
        return 4 * self.channels


def batchnorm2d(x: Tensor, spec: BatchNormSpec, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                mode: Literal["train", "infer"] = "train",
                updates: Optional[np.ndarray] = None) -> Tensor:
    """Per-channel standardization; updates ``running_*`` in place in train mode.

    With an ``updates`` counter the running statistics start as a cumulative
    average (momentum t/(t+1) at update t) and switch to the exponential
    average once that exceeds ``spec.momentum``. Without one, it is a plain
    exponential average from the initial values.
    """
    _need4("batchnorm2d", x)
    n, c, h, w = x.shape
    if c != spec.channels:
        raise ShapeError(f"batchnorm2d: input has {c} channels, spec expects {spec.channels}")
    g_ = gamma.data.reshape(1, c, 1, 1)
    b_ = beta.data.reshape(1, c, 1, 1)
    if mode == "infer":
        inv = 1.0 / np.sqrt(running_var.astype(x.dtype) + spec.epsilon)
        scale = (g_.reshape(c) * inv).reshape(1, c, 1, 1)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        y = (xhat * g_ + b_).astype(x.dtype)

        def bw_infer(g, needs):
            return (g * scale if needs[0] else None,
                    (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None,
                    g.sum(axis=(0, 2, 3)) if needs[2] else None)

        return record("batchnorm2d", (x, gamma, beta), y, bw_infer)
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    m = n * h * w
    if m < 2:
        raise ShapeError("batchnorm2d: train mode needs batch*height*width >= 2")
    mu = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv = (1.0 / np.sqrt(var + spec.epsilon)).astype(x.dtype)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    y = (xhat * g_ + b_).astype(x.dtype)
    mom = spec.momentum
    if updates is not None:
        t = float(updates[0])
        mom = min(mom, t / (t + 1.0))
        updates += 1
    running_mean *= mom
    running_mean += (1 - mom) * mu
    running_var *= mom
    running_var += (1 - mom) * var

    def bw(g, needs):
        gsum = g.sum(axis=(0, 2, 3))
        gxhat_sum = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if needs[0]:
            k = (gamma.data * inv / m).reshape(1, c, 1, 1)
            gx = k * (m * g - gsum.reshape(1, c, 1, 1) - xhat * gxhat_sum.reshape(1, c, 1, 1))
        return (gx, gxhat_sum if needs[1] else None, gsum if needs[2] else None)

    return record("batchnorm2d", (x, gamma, beta), y, bw)


def dropout(x: Tensor, rate: float = 0.5, mode: Literal["train", "infer"] = "train",
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) in train mode."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0:
        return identity(x)
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return record("dropout", (x,), x.data * keep, lambda g, needs: (g * keep,))
