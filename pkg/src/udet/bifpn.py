"""Weighted bidirectional feature pyramid bridging encoder and decoder.

Wiring, for laterally projected levels L1..L5 (finest first)::

    T4 = Block(fuse(L4, up(L5)))
    T3 = Block(fuse(L3, up(T4)))
    T2 = Block(fuse(L2, up(T3)))
    O1 = Block(fuse(L1, up(T2)))
    Oi = Block(fuse(Li, Ti, down(O(i-1))))   for i = 2, 3, 4
    O5 = L5

``Block`` is depthwise 3x3 -> batch-norm -> relu, ``up`` is nearest-neighbour
2x upsampling and ``down`` is 2x2 max-pooling. Each lateral projection is a
bias-free 1x1 conv -> batch-norm -> relu. That gives 7 depthwise convs,
12 batch-norms, 12 relus and 3 max-pools.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .layers import Activation, BatchNorm2D, Conv2D, DepthwiseConv2D, Mode, ParamInfo, Registry
from .tensor import Tensor, note_branch, record

FUSION_EPSILON = 1e-4
LEVELS = 5


def fusion_coefficients(weights: np.ndarray, eps: float = FUSION_EPSILON) -> np.ndarray:
    r = np.maximum(weights, 0)
    return r / (eps + r.sum())


def fuse(weights: Tensor, inputs: Sequence[Tensor], eps: float = FUSION_EPSILON) -> Tensor:
    """Fast normalized fusion: sum_i relu(w_i) / (eps + sum_j relu(w_j)) * I_i."""
    n = len(inputs)
    if weights.shape != (n,):
        raise ops.ShapeError(f"fuse: {n} inputs but weight vector of shape {weights.shape}")
    shape = inputs[0].shape
    for t in inputs[1:]:
        if t.shape != shape:
            raise ops.ShapeError(f"fuse: input shapes differ: {shape} vs {t.shape}")
    w = weights.data.astype(np.float64)
    r = np.maximum(w, 0)
    note_branch(w > 0)
    denom = eps + r.sum()
    coef = r / denom
    dtype = inputs[0].dtype
    out = np.zeros(shape, dtype=dtype)
    for c, t in zip(coef, inputs):
        out += dtype.type(c) * t.data

    def bw(g, needs):
        grads = [dtype.type(c) * g if need else None for c, need in zip(coef, needs[1:])]
        gw = None
        if needs[0]:
            a = np.array([np.vdot(g, t.data) for t in inputs], dtype=np.float64)
            gr = a / denom - (a * r).sum() / denom ** 2
            gw = (gr * (w > 0)).astype(weights.dtype)
        return [gw, *grads]

    return record("fuse", (weights, *inputs), out, bw)


@dataclass
class FusionNode:
    weights: Tensor
    arity: int

    def __call__(self, inputs: Sequence[Tensor]) -> Tensor:
        if len(inputs) != self.arity:
            raise ValueError(f"fusion node expects {self.arity} inputs, got {len(inputs)}")
        return fuse(self.weights, inputs)


class _Block:
    """depthwise 3x3 -> batch-norm -> relu"""

    def __init__(self, reg: Registry, name: str, width: int):
        self.dw = DepthwiseConv2D(reg, f"{name}.dw", width, "bifpn")
        self.bn = BatchNorm2D(reg, f"{name}.bn", width, "bifpn")
        self.act = Activation(reg, f"{name}.relu", "relu", "bifpn")

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        return self.act(self.bn(self.dw(x), mode))


class _Lateral:
    def __init__(self, reg: Registry, name: str, in_ch: int, width: int):
        self.conv = Conv2D(reg, f"{name}.conv", ops.Conv2DSpec(in_ch, width, (1, 1), bias=False), "bifpn")
        self.bn = BatchNorm2D(reg, f"{name}.bn", width, "bifpn")
        self.act = Activation(reg, f"{name}.relu", "relu", "bifpn")

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        return self.act(self.bn(self.conv(x), mode))


class BiFPN:
    def __init__(self, reg: Registry, in_channels: Sequence[int], width: int = 64, name: str = "bifpn"):
        if len(in_channels) != LEVELS:
            raise ValueError(f"BiFPN needs {LEVELS} pyramid levels, got {len(in_channels)}")
        self.in_channels = tuple(in_channels)
        self.width = width
        self.laterals = [_Lateral(reg, f"{name}.lateral{i + 1}", c, width) for i, c in enumerate(in_channels)]

        def node(key: str, arity: int) -> FusionNode:
            w = reg.param(f"{name}.{key}.fusion", (arity,), ParamInfo("one"))
            reg.layer(f"{name}.{key}.fuse", "fuse", "bifpn")
            return FusionNode(w, arity)

        # top-down T4, T3, T2 then O1
        self.td_nodes = {i: node(f"td{i}", 2) for i in (4, 3, 2)}
        self.td_blocks = {i: _Block(reg, f"{name}.td{i}", width) for i in (4, 3, 2)}
        self.out1_node = node("out1", 2)
        self.out1_block = _Block(reg, f"{name}.out1", width)
        # bottom-up O2..O4
        for i in (2, 3, 4):
            reg.layer(f"{name}.down{i}", "maxpool2d", "bifpn")
        self.bu_nodes = {i: node(f"out{i}", 3) for i in (2, 3, 4)}
        self.bu_blocks = {i: _Block(reg, f"{name}.out{i}", width) for i in (2, 3, 4)}

    def lateral_project(self, feats: Sequence[Tensor], mode: Mode) -> list[Tensor]:
        chans = tuple(f.shape[1] for f in feats)
        if chans != self.in_channels:
            raise ops.ShapeError(f"BiFPN entry channels {chans} != expected {self.in_channels}")
        return [lat(f, mode) for lat, f in zip(self.laterals, feats)]

    def forward_projected(self, lat: Sequence[Tensor], mode: Mode) -> list[Tensor]:
        for a, b in zip(lat, lat[1:]):
            if a.shape[2] != 2 * b.shape[2] or a.shape[3] != 2 * b.shape[3]:
                raise ops.ShapeError(f"pyramid levels must halve: {a.shape} -> {b.shape}")
        L = {i + 1: t for i, t in enumerate(lat)}
        T = {}
        nxt = L[5]
        for i in (4, 3, 2):
            T[i] = self.td_blocks[i](self.td_nodes[i]([L[i], ops.upsample2x(nxt)]), mode)
            nxt = T[i]
        O = {1: self.out1_block(self.out1_node([L[1], ops.upsample2x(T[2])]), mode)}
        for i in (2, 3, 4):
            O[i] = self.bu_blocks[i](self.bu_nodes[i]([L[i], T[i], ops.maxpool2d(O[i - 1])]), mode)
        O[5] = L[5]
        return [O[i] for i in range(1, LEVELS + 1)]

    def __call__(self, feats: Sequence[Tensor], mode: Mode) -> list[Tensor]:
        return self.forward_projected(self.lateral_project(feats, mode), mode)
