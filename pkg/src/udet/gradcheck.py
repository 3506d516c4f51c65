"""Central finite-difference gradient checking.

The scalar probed is ``sum(f(inputs) * R)`` for a fixed random projection
``R``. The numeric derivative uses the step actually realized in floating
point, ``(x+h) - (x-h)``, and divides the elementwise output difference by it before
projecting, so linear ops check exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, Tape, backward, branch_trace, no_grad


@dataclass
class GradReport:
    errors: list = field(default_factory=list)
    tolerance: float = 1e-4
    failure: Optional[str] = None
    skipped: int = 0  # probes whose +-h interval crossed a kink

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_error <= self.tolerance

    def __str__(self) -> str:
        if self.failure:
            return f"FAIL ({self.failure})"
        state = "ok" if self.passed else "FAIL"
        skip = f", {self.skipped} kink probes skipped" if self.skipped else ""
        return f"{state} max rel. error {self.max_error:.3e} (tol {self.tolerance:g}{skip})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|); 0 when both vanish."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], tolerance: float = 1e-4,
               step: float = 1e-5, seed: int = 0, projection: str = "random",
               max_elements: Optional[int] = None, max_total: int = 10_000) -> GradReport:
    """Compare backward() against central differences for every input.

    Inputs must be float64. ``max_elements`` limits the probed entries per
    input for large compositions: the entry with the largest analytic
    gradient plus a random draw from the rest, so the error scale reflects
    the tensor's actual gradient magnitude rather than roundoff. Probes whose
    two evaluations take different branches through a piecewise op are not
    derivative estimates; they are counted in ``skipped`` and replaced.
    """
    report = GradReport(tolerance=tolerance)
    if sum(t.size for t in inputs) > max_total and max_elements is None:
        raise ValueError(f"grad_check inputs exceed {max_total} elements; pass max_elements")
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check needs float64 inputs (use udet.tensor.precision('float64'))")
        t.requires_grad = True
        t.grad = None

    with Tape():
        out = fn(*inputs)
        rng = np.random.default_rng(seed)
        if projection == "ones":
            proj = np.ones(out.shape)
        else:
            proj = rng.uniform(0.5, 1.5, size=out.shape) * rng.choice([-1.0, 1.0], size=out.shape)
        if not np.all(np.isfinite(out.data)):
            bad = np.argwhere(~np.isfinite(out.data))[0]
            report.failure = f"non-finite output at index {tuple(int(i) for i in bad)}"
            return report
        loss = ops.sum(ops.mul(out, Tensor(proj)))
        backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    pick_rng = np.random.default_rng(seed + 1)
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        grad = analytic[k].reshape(-1)
        if max_elements is not None and flat.size > max_elements:
            # largest entry first, then a random order to draw replacements from
            top = int(np.argmax(np.abs(grad)))
            queue = [top] + [int(i) for i in pick_rng.permutation(np.delete(np.arange(flat.size), top))]
            want = max_elements
        else:
            queue = list(range(flat.size))
            want = flat.size
        probed, numeric = [], []
        for i in queue:
            if len(probed) == want:
                break
            orig = flat[i]
            flat[i] = orig + step
            hi = flat[i]
            with no_grad(), branch_trace() as trace_p:
                fp = fn(*inputs).data.copy()
            flat[i] = orig - step
            lo = flat[i]
            with no_grad(), branch_trace() as trace_m:
                fm = fn(*inputs).data.copy()
            flat[i] = orig
            if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
                report.failure = f"non-finite value probing input {k} element {int(i)}"
                return report
            if not _same_branches(trace_p, trace_m):
                report.skipped += 1
                continue
            probed.append(i)
            numeric.append(np.sum((fp - fm) / (hi - lo) * proj))
        if not probed:
            report.failure = f"every probed element of input {k} straddles a kink"
            return report
        report.errors.append(relative_error(grad[probed], np.asarray(numeric)))
    return report


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
