"""The finite-difference gradient suite over every differentiable primitive."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import ops
from .bifpn import fuse
from .gradcheck import GradReport, grad_check
from .metrics import weighted_bce
from .model import build
from .tensor import Tensor, precision
from .train import init_weights

PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class SuiteResult:
    name: str
    seed: int
    report: GradReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale)


def _cases(rng: np.random.Generator) -> Iterator[tuple[str, Callable, list]]:
    spec = ops.Conv2DSpec(2, 3)
    yield "conv2d", lambda x, w, b: ops.conv2d(x, spec, w, b), [_t(rng, 1, 2, 5, 5), _t(rng, 3, 2, 3, 3), _t(rng, 3)]
    s2 = ops.Conv2DSpec(2, 2, (3, 3), 2, "valid")
    yield "conv2d_stride2_valid", lambda x, w, b: ops.conv2d(x, s2, w, b), [_t(rng, 2, 2, 7, 6), _t(rng, 2, 2, 3, 3), _t(rng, 2)]
    pw = ops.Conv2DSpec(3, 2, (1, 1), bias=False)
    yield "conv2d_1x1", lambda x, w: ops.conv2d(x, pw, w), [_t(rng, 2, 3, 4, 4), _t(rng, 2, 3, 1, 1)]
    ts = ops.Conv2DSpec(3, 2, (2, 2), 2, "valid")
    yield "transposed_conv2d", lambda x, w, b: ops.transposed_conv2d(x, ts, w, b), [_t(rng, 2, 3, 3, 2), _t(rng, 3, 2, 2, 2), _t(rng, 2)]
    yield "depthwise_conv2d", ops.depthwise_conv2d, [_t(rng, 2, 3, 5, 4), _t(rng, 3, 3, 3)]
    yield "maxpool2d", ops.maxpool2d, [_t(rng, 2, 3, 4, 6)]
    yield "upsample2x", ops.upsample2x, [_t(rng, 2, 2, 3, 2)]
    bn = ops.BatchNormSpec(3)
    rm, rv = np.zeros(3), np.ones(3)
    yield "batchnorm2d_train", lambda x, g, b: ops.batchnorm2d(x, bn, g, b, rm, rv, "train"), \
        [_t(rng, 2, 3, 3, 3, scale=2.0), _t(rng, 3), _t(rng, 3)]
    rm2, rv2 = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    yield "batchnorm2d_infer", lambda x, g, b: ops.batchnorm2d(x, bn, g, b, rm2, rv2, "infer"), \
        [_t(rng, 2, 3, 3, 3), _t(rng, 3), _t(rng, 3)]
    dseed = int(rng.integers(1 << 31))
    yield "dropout", lambda x: ops.dropout(x, 0.5, "train", np.random.default_rng(dseed)), [_t(rng, 2, 2, 4, 4)]
    yield "concat_channels", ops.concat_channels, [_t(rng, 1, 2, 3, 3), _t(rng, 1, 3, 3, 3)]
    yield "slice_channels", lambda x: ops.slice_channels(x, 1, 3), [_t(rng, 1, 4, 3, 3)]
    yield "mish", ops.mish, [_t(rng, 2, 3, 4, 4, scale=3.0)]
    yield "relu", ops.relu, [_t(rng, 2, 3, 4, 4)]
    yield "sigmoid", ops.sigmoid, [_t(rng, 2, 3, 4, 4, scale=3.0)]
    yield "softplus", ops.softplus, [_t(rng, 2, 3, 4, 4, scale=3.0)]
    yield "fuse2", lambda w, a, b: fuse(w, [a, b]), [Tensor(rng.uniform(0.2, 2.0, 2)), _t(rng, 1, 2, 3, 3), _t(rng, 1, 2, 3, 3)]
    yield "fuse3", lambda w, a, b, c: fuse(w, [a, b, c]), \
        [Tensor(rng.uniform(0.2, 2.0, 3)), _t(rng, 1, 2, 3, 3), _t(rng, 1, 2, 3, 3), _t(rng, 1, 2, 3, 3)]
    y = (rng.random((1, 1, 4, 4)) < 0.4).astype(np.uint8)
    w = float(rng.uniform(1.0, 20.0))
    yield "weighted_bce", lambda p: weighted_bce(p, y, w), [Tensor(rng.uniform(0.05, 0.95, (1, 1, 4, 4)))]


def primitive_results(seeds=range(5)) -> list[SuiteResult]:
    out = []
    with precision("float64"):
        for seed in seeds:
            rng = np.random.default_rng(seed)
            for name, fn, inputs in _cases(rng):
                t0 = time.perf_counter()
                rep = grad_check(fn, inputs, tolerance=PRIMITIVE_TOL, seed=seed)
                out.append(SuiteResult(name, seed, rep, time.perf_counter() - t0))
    return out


def end_to_end_result(seed: int = 0, variant: str = "udet", size: int = 32, per_param: int = 3) -> SuiteResult:
    """Whole-model check at 1/8 width: every parameter tensor, sampled entries."""
    t0 = time.perf_counter()
    with precision("float64"):
        g = build(variant, size, "1/8", dtype=np.float64)
        init_weights(g, seed)
        rng = np.random.default_rng(seed)
        # perturb zero-initialized biases/shifts so every path is exercised off its init point
        for name, p in g.params.items():
            if name.endswith((".bias", ".beta")):
                p.data[...] = rng.normal(0, 0.05, p.shape)
        x = rng.random((1, 1, size, size))
        y = (rng.random((1, 1, size, size)) < 0.2).astype(np.uint8)
        params = g.parameters()

        def loss(*_):
            return weighted_bce(g.forward(x, "train", np.random.default_rng(seed)), y, 4.0)

        rep = grad_check(loss, params, tolerance=END_TO_END_TOL,
                         seed=seed, max_elements=per_param)
    return SuiteResult(f"end_to_end_{variant}", seed, rep, time.perf_counter() - t0)


def run_suite(seeds=range(5), end_to_end: bool = True) -> list[SuiteResult]:
    results = primitive_results(seeds)
    if end_to_end:
        results.append(end_to_end_result())
    return results
