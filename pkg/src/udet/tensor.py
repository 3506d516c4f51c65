"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable primitive goes through :func:`record`, which computes
nothing itself but appends a :class:`Node` to the active :class:`Tape` when at
least one input requires a gradient. :func:`backward` replays that tape in
reverse from a scalar loss.
"""
from __future__ import annotations

import contextlib
import logging
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_default_dtype = np.dtype(np.float32)
_grad_enabled = True


def default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors and parameters."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def is_grad_enabled() -> bool:
    return _grad_enabled


_branch_traces: list = []


@contextlib.contextmanager
def branch_trace() -> Iterator[list]:
    """Collect the branch taken by every piecewise op evaluated inside.

    Two evaluations whose traces differ straddle a kink (a relu sign flip, a
    maxpool argmax switch, ...), where finite differences are meaningless.
    """
    trace: list = []
    _branch_traces.append(trace)
    try:
        yield trace
    finally:
        _branch_traces.pop()


def note_branch(pattern: np.ndarray) -> None:
    if _branch_traces:
        _branch_traces[-1].append(np.array(pattern, copy=True))


class Tensor:
    """An n-d array (rank 4 for activations) with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        # python numbers and non-float arrays take the default precision
        if dtype is None and (not isinstance(data, np.ndarray) or arr.dtype not in (np.float32, np.float64)):
            arr = arr.astype(_default_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1, 1, 1)
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be >= 1, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar; the primitives live in udet.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, as_tensor(other, self.dtype))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, as_tensor(-1.0, self.dtype))

    def sum(self) -> "Tensor":
        from . import ops
        return ops.sum(self)


class Parameter(Tensor):
    """A named leaf tensor that is trained."""

    __slots__ = ()

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, name=name,
                         dtype=dtype if dtype is not None else _default_dtype)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _default_dtype))


BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence[Optional[np.ndarray]]]


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn", "tape", "index")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn: BackwardFn):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn
        self.tape: Optional[Tape] = None
        self.index = -1

    def __repr__(self) -> str:
        return f"Node({self.op}, inputs={[t.shape for t in self.inputs]})"


class Tape:
    """Ordered record of operations; usable as a context manager."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def append(self, node: Node) -> None:
        node.tape = self
        node.index = len(self.nodes)
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.output.node = None
            node.tape = None
        self.nodes = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)


_tape_stack: list[Tape] = [Tape()]


def current_tape() -> Tape:
    return _tape_stack[-1]


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out_data`` as a tensor and, if any input needs grad, tape it.

    ``backward_fn(grad_out, needs)`` returns one gradient (or None) per input;
    ``needs[i]`` tells whether input ``i`` wants one.
    """
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, inputs, out, backward_fn)
        current_tape().append(node)
        out.node = node
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1 or any(d != 1 for d in loss.shape):
        raise ValueError(f"backward needs a scalar (1,1,1,1) loss, got shape {loss.shape}")
    node = loss.node
    if node is None or node.tape is None:
        raise ValueError("loss was not produced on a tape (no recorded operation leads to it)")
    tape = node.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for nd in reversed(tape.nodes[: node.index + 1]):
        g = grads.pop(id(nd.output), None)
        if g is None:
            continue
        needs = [t.requires_grad for t in nd.inputs]
        in_grads = nd.backward_fn(g, needs)
        for inp, gi, need in zip(nd.inputs, in_grads, needs):
            if gi is None or not need:
                continue
            if gi.shape != inp.shape:
                raise RuntimeError(f"{nd.op}: gradient shape {gi.shape} != input shape {inp.shape}")
            if inp.node is None:
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=inp.dtype, copy=True)
                else:
                    inp.grad += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
