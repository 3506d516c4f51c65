"""Compiled vs numpy kernels: timing and agreement.

    python benchmarks/bench_kernels.py [--repeat 20] [--dtype float32]

Each kernel runs on shapes seen in a width-1/4, 128x128 U-Det forward pass.
"""
from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from udet.kernels import compiled_backend, python_backend


def _cases(rng, dtype):
    x = rng.standard_normal((2, 16, 128, 128)).astype(dtype)
    small = rng.standard_normal((2, 64, 32, 32)).astype(dtype)
    k = rng.standard_normal((16, 3, 3)).astype(dtype)
    cols = rng.standard_normal((2, 16 * 9, 128 * 128)).astype(dtype)
    flat = (rng.standard_normal(2 * 16 * 128 * 128) * 4).astype(dtype)
    _, idx = python_backend.maxpool2x2_forward(x)
    gy_pool = rng.standard_normal((2, 16, 64, 64)).astype(dtype)
    return [
        ("im2col 3x3 16ch 128^2", lambda b: b.im2col(x, 3, 3, 1, 1, 1)),
        ("im2col 3x3 64ch 32^2", lambda b: b.im2col(small, 3, 3, 1, 1, 1)),
        ("col2im 3x3 16ch 128^2", lambda b: b.col2im(cols, 16, 128, 128, 3, 3, 1, 1, 1)),
        ("depthwise fwd 16ch 128^2", lambda b: b.depthwise_forward(x, k)),
        ("depthwise bwd 16ch 128^2", lambda b: b.depthwise_backward(x, k, x)),
        ("maxpool fwd 16ch 128^2", lambda b: b.maxpool2x2_forward(x)),
        ("maxpool bwd 16ch 128^2", lambda b: b.maxpool2x2_backward(gy_pool, idx)),
        ("mish fwd 524k", lambda b: b.mish_forward(flat)),
        ("mish bwd 524k", lambda b: b.mish_backward(flat, flat)),
    ]


def _max_diff(a, b) -> float:
    if isinstance(a, tuple):
        return max(_max_diff(u, v) for u, v in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = ap.parse_args(argv)
    if compiled_backend is None:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}{'max |diff|':>12}")
    for name, fn in _cases(rng, np.dtype(args.dtype)):
        t_py = min(timeit.repeat(lambda: fn(python_backend), number=1, repeat=args.repeat))
        t_c = min(timeit.repeat(lambda: fn(compiled_backend), number=1, repeat=args.repeat))
        diff = _max_diff(fn(python_backend), fn(compiled_backend))
        print(f"{name:<28}{t_py * 1e3:>10.2f}{t_c * 1e3:>11.2f}{t_py / t_c:>8.1f}x{diff:>12.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
