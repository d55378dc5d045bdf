"""Dense float64 tensors with reverse-mode differentiation on a recording tape.

A ``Variable`` wraps a numpy float64 array (the tensor carrier) together with
a lazily materialized gradient buffer of the same shape.  Operations executed
while a ``Tape`` is active append a backward rule to the tape; ``backward``
replays the tape in exact reverse recording order, accumulating gradients
additively so that parameters shared across many sub-expressions (embedding
rows, recurrent weights) receive the sum of all their contributions.

With no tape active, every operation is value-only: nothing is recorded and
no gradients flow.  That is the evaluation mode.

Besides the elementary ops, ``record_op`` lets callers register a fused
operation with a hand-written backward rule (used for the recurrent step and
attention pooling, which would otherwise dominate the tape with dozens of
tiny entries each).  Fused rules are held to the same finite-difference
checks as everything else.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_STATE = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class Tape:
    """Ordered record of one forward pass.

    Each entry stores the output node id, the input node ids and a backward
    rule.  Recording order is execution order, so reversing it is a valid
    reverse-topological traversal.  A tape is confined to a single thread.
    """

    def __init__(self):
        self.entries: list[tuple[int, tuple[int, ...], Callable[[], None]]] = []
        self.nodes: list["Variable"] = []
        self._next_id = 0

    def _register(self, var: "Variable") -> int:
        nid = var.node_id
        if nid is None:
            nid = var.node_id = self._next_id
            self._next_id += 1
            self.nodes.append(var)
        return nid

    def zero_grads(self) -> None:
        """Clear the gradient of every Variable registered on this tape."""
        for var in self.nodes:
            var.zero_grad()

    def record(self, out: "Variable", inputs: Sequence["Variable"],
               backward_fn: Callable[[], None]) -> None:
        reg = self._register
        self.entries.append((reg(out), tuple([reg(v) for v in inputs]), backward_fn))

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, *exc):
        _STATE.tape = None
        return False


class Variable:
    """A float64 tensor with a same-shape gradient buffer."""

    __slots__ = ("data", "_grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self._grad = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None

    @property
    def grad(self) -> np.ndarray:
        # Materialized on first touch so value-only passes stay allocation-free.
        g = self._grad
        if g is None:
            g = self._grad = np.zeros_like(self.data)
        return g

    @grad.setter
    def grad(self, value) -> None:
        self._grad = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Variable(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all dispatch to the module-level ops below.
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return add_const(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add_const(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        # float - Variable, e.g. the 1 - z term of a gate
        return add_const(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        if other.data.ndim == 0 and self.data.ndim != 0:
            return smul(other, self)
        if self.data.ndim == 0 and other.data.ndim != 0:
            return smul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def param(data) -> Variable:
    """A trainable leaf."""
    return Variable(data, requires_grad=True)


def const(data) -> Variable:
    """A non-trainable leaf."""
    return Variable(data, requires_grad=False)


def _result(data: np.ndarray, requires: bool, inputs: tuple,
            make_backward) -> Variable:
    out = Variable.__new__(Variable)
    out.data = data
    out._grad = None
    out.requires_grad = requires
    out.node_id = None
    if requires:
        tape = getattr(_STATE, "tape", None)
        if tape is not None:
            tape.record(out, inputs, make_backward(out))
    return out


def record_op(data, inputs: Sequence[Variable], make_backward) -> Variable:
    """Register a fused operation.

    ``make_backward(out)`` must return a closure that reads ``out.grad`` and
    accumulates (+=) into the grads of every input that requires them.
    """
    requires = False
    for v in inputs:
        if v.requires_grad:
            requires = True
            break
    return _result(np.asarray(data, dtype=np.float64), requires,
                   tuple(inputs), make_backward)


def _require_same_shape(a: Variable, b: Variable, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# core operations
# ---------------------------------------------------------------------------

def matmul(a: Variable, b: Variable) -> Variable:
    """Matrix product; accepts 2d@2d, 2d@1d and 1d@2d operand shapes."""
    ad, bd = a.data, b.data
    requires = a.requires_grad or b.requires_grad
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dimensions of {ad.shape} and {bd.shape} disagree")

        def bwd(out):
            def fn():
                if a.requires_grad:
                    a.grad += out.grad @ bd.T
                if b.requires_grad:
                    b.grad += ad.T @ out.grad
            return fn

        return _result(ad @ bd, requires, (a, b), bwd)

    if ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dimensions of {ad.shape} and {bd.shape} disagree")

        def bwd(out):
            def fn():
                if a.requires_grad:
                    a.grad += out.grad[:, None] * bd
                if b.requires_grad:
                    b.grad += ad.T @ out.grad
            return fn

        return _result(ad @ bd, requires, (a, b), bwd)

    if ad.ndim == 1 and bd.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dimensions of {ad.shape} and {bd.shape} disagree")

        def bwd(out):
            def fn():
                if a.requires_grad:
                    a.grad += bd @ out.grad
                if b.requires_grad:
                    b.grad += ad[:, None] * out.grad
            return fn

        return _result(ad @ bd, requires, (a, b), bwd)

    raise ShapeError(f"matmul: unsupported operand shapes {ad.shape} and {bd.shape}")


def dot(a: Variable, b: Variable) -> Variable:
    """Inner product of two vectors (scalar output)."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError(f"dot: expected vectors, got {a.data.shape} and {b.data.shape}")
    _require_same_shape(a, b, "dot")

    def bwd(out):
        def fn():
            if a.requires_grad:
                a.grad += out.grad * b.data
            if b.requires_grad:
                b.grad += out.grad * a.data
        return fn

    return _result(np.dot(a.data, b.data), a.requires_grad or b.requires_grad,
                   (a, b), bwd)


def add(a: Variable, b: Variable) -> Variable:
    _require_same_shape(a, b, "add")

    def bwd(out):
        def fn():
            if a.requires_grad:
                a.grad += out.grad
            if b.requires_grad:
                b.grad += out.grad
        return fn

    return _result(a.data + b.data, a.requires_grad or b.requires_grad, (a, b), bwd)


def sub(a: Variable, b: Variable) -> Variable:
    _require_same_shape(a, b, "sub")

    def bwd(out):
        def fn():
            if a.requires_grad:
                a.grad += out.grad
            if b.requires_grad:
                b.grad -= out.grad
        return fn

    return _result(a.data - b.data, a.requires_grad or b.requires_grad, (a, b), bwd)


def mul(a: Variable, b: Variable) -> Variable:
    """Elementwise product of same-shape operands."""
    _require_same_shape(a, b, "mul")

    def bwd(out):
        def fn():
            if a.requires_grad:
                a.grad += out.grad * b.data
            if b.requires_grad:
                b.grad += out.grad * a.data
        return fn

    return _result(a.data * b.data, a.requires_grad or b.requires_grad, (a, b), bwd)


def smul(s: Variable, v: Variable) -> Variable:
    """Scalar Variable times tensor Variable (attention weight times vector)."""
    if s.data.ndim != 0:
        raise ShapeError(f"smul: scaling factor must be a scalar, got shape {s.data.shape}")

    def bwd(out):
        def fn():
            if v.requires_grad:
                v.grad += out.grad * s.data
            if s.requires_grad:
                s.grad += np.sum(out.grad * v.data)
        return fn

    return _result(s.data * v.data, s.requires_grad or v.requires_grad, (s, v), bwd)


def scale(v: Variable, c: float) -> Variable:
    """Multiply by a python float constant."""

    def bwd(out):
        def fn():
            if v.requires_grad:
                v.grad += c * out.grad
        return fn

    return _result(v.data * c, v.requires_grad, (v,), bwd)


def add_const(v: Variable, c: float) -> Variable:
    def bwd(out):
        def fn():
            if v.requires_grad:
                v.grad += out.grad
        return fn

    return _result(v.data + c, v.requires_grad, (v,), bwd)


def cmul(v: Variable, mask: np.ndarray) -> Variable:
    """Elementwise product with a constant array (dropout masks)."""
    if v.data.shape != mask.shape:
        raise ShapeError(f"cmul: shapes {v.data.shape} and {mask.shape} differ")

    def bwd(out):
        def fn():
            if v.requires_grad:
                v.grad += out.grad * mask
        return fn

    return _result(v.data * mask, v.requires_grad, (v,), bwd)


def tanh(v: Variable) -> Variable:
    t = np.tanh(v.data)

    def bwd(out):
        def fn():
            if v.requires_grad:
                v.grad += out.grad * (1.0 - t * t)
        return fn

    return _result(t, v.requires_grad, (v,), bwd)


def sigmoid(v: Variable) -> Variable:
    s = 1.0 / (1.0 + np.exp(-v.data))

    def bwd(out):
        def fn():
            if v.requires_grad:
                v.grad += out.grad * s * (1.0 - s)
        return fn

    return _result(s, v.requires_grad, (v,), bwd)


def log(v: Variable) -> Variable:
    def bwd(out):
        def fn():
            if v.requires_grad:
                v.grad += out.grad / v.data
        return fn

    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.log(v.data)
    return _result(data, v.requires_grad, (v,), bwd)


def clamp(v: Variable, lo: float, hi: float) -> Variable:
    """Clip into [lo, hi]; gradient passes only where the input was inside."""
    inside = (v.data >= lo) & (v.data <= hi)

    def bwd(out):
        def fn():
            if v.requires_grad:
                v.grad += out.grad * inside
        return fn

    return _result(np.clip(v.data, lo, hi), v.requires_grad, (v,), bwd)


def softmax(v: Variable) -> Variable:
    """Normalized exponential of a vector, stabilized by max-subtraction."""
    if v.data.ndim != 1:
        raise ShapeError(f"softmax: expected a vector, got shape {v.data.shape}")
    if v.data.shape[0] == 0:
        raise ShapeError("softmax: empty input")
    e = np.exp(v.data - np.max(v.data))
    y = e / np.sum(e)

    def bwd(out):
        def fn():
            if v.requires_grad:
                v.grad += y * (out.grad - np.dot(out.grad, y))
        return fn

    return _result(y, v.requires_grad, (v,), bwd)


def concat(a: Variable, b: Variable) -> Variable:
    """Concatenate two vectors; backward splits the gradient."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError(f"concat: expected vectors, got {a.data.shape} and {b.data.shape}")
    m = a.data.shape[0]

    def bwd(out):
        def fn():
            if a.requires_grad:
                a.grad += out.grad[:m]
            if b.requires_grad:
                b.grad += out.grad[m:]
        return fn

    return _result(np.concatenate([a.data, b.data]),
                   a.requires_grad or b.requires_grad, (a, b), bwd)


def stack(scalars: Sequence[Variable]) -> Variable:
    """Collect scalar Variables into one vector (attention scores)."""
    items = list(scalars)
    for s in items:
        if s.data.ndim != 0:
            raise ShapeError(f"stack: expected scalars, got shape {s.data.shape}")

    def bwd(out):
        def fn():
            g = out.grad
            for i, s in enumerate(items):
                if s.requires_grad:
                    s.grad += g[i]
        return fn

    return _result(np.array([s.data for s in items]),
                   any(s.requires_grad for s in items), tuple(items), bwd)


def pick(v: Variable, i: int) -> Variable:
    """Read one entry of a vector as a scalar Variable."""
    if v.data.ndim != 1:
        raise ShapeError(f"pick: expected a vector, got shape {v.data.shape}")

    def bwd(out):
        def fn():
            if v.requires_grad:
                v.grad[i] += out.grad
        return fn

    return _result(v.data[i], v.requires_grad, (v,), bwd)


def row(m: Variable, i: int) -> Variable:
    """Read one row of a matrix (embedding lookup); gradients scatter back."""
    if m.data.ndim != 2:
        raise ShapeError(f"row: expected a matrix, got shape {m.data.shape}")

    def bwd(out):
        def fn():
            if m.requires_grad:
                m.grad[i] += out.grad
        return fn

    return _result(m.data[i], m.requires_grad, (m,), bwd)


def total(v: Variable) -> Variable:
    """Sum of all entries (scalar)."""

    def bwd(out):
        def fn():
            if v.requires_grad:
                v.grad += out.grad
        return fn

    return _result(np.sum(v.data), v.requires_grad, (v,), bwd)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Variable, tape: Tape | None = None) -> None:
    """Seed d(loss)/d(loss) = 1 and replay the tape in reverse order.

    Gradients accumulate into every ``requires_grad`` Variable reachable from
    the loss.  Call ``zero_grad`` on parameters between passes unless
    accumulation across passes (mini-batching) is intended.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if tape is None:
        tape = active_tape()
    loss.grad += np.ones_like(loss.data)
    if tape is None:
        return
    for entry in reversed(tape.entries):
        entry[2]()


def grad_check(f: Callable[[], Variable], params: Sequence[Variable],
               h: float = 1e-5) -> float:
    """Compare analytic gradients of ``f`` against central finite differences.

    ``f`` rebuilds its computation from the current parameter values on every
    call and must be deterministic (dropout off).  Returns the worst relative
    error max|analytic - numeric| / max(1, |analytic|, |numeric|) over every
    coordinate of every parameter.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
        if out.data.size != 1:
            raise ShapeError(f"grad_check: f must return a scalar, got {out.data.shape}")
        if not np.isfinite(out.data).all():
            raise FloatingPointError("grad_check: f evaluated to a non-finite value")
        backward(out, tape)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f().data)
            flat[i] = orig - h
            f_minus = float(f().data)
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise FloatingPointError("grad_check: f evaluated to a non-finite value")
            numeric = (f_plus - f_minus) / (2.0 * h)
            ana = gflat[i]
            rel = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
            if rel > worst:
                worst = rel
    return worst


def zero_grads(params: Sequence[Variable]) -> None:
    for p in params:
        p.zero_grad()
