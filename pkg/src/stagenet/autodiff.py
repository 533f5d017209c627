"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built define-by-run: every operation returns a new :class:`Value`
holding its parents and a closure that pushes the incoming gradient back to
them. Calling :meth:`Value.backward` on a scalar sweeps the graph once in
reverse topological order.

Arrays are row-batched: vector operations (softmax, cumsum, concat,
repeat_chunks, slice) act on the last axis, so a ``(B, n)`` value is ``B``
independent vectors.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build values without recording gradients (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x)
    # extended precision passes through so grad_check can evaluate in it
    return a if a.dtype == np.longdouble else np.asarray(a, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Value, b: Value, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


class Value:
    """A node in the autodiff graph wrapping a float64 array."""

    __slots__ = ("data", "grad", "_parents", "_backward", "op", "requires_grad")
    # make ndarray <op> Value dispatch to Value's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, parents: Sequence[Value] = (), op: str = "",
                 requires_grad: bool | None = None):
        self.data = _as_array(data)
        self._parents = tuple(parents)
        self._backward: Callable[[], None] | None = None
        self.op = op
        if requires_grad is None:
            requires_grad = _grad_enabled and any(p.requires_grad for p in self._parents)
        if not requires_grad:
            self._parents = ()
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, op={self.op!r})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.requires_grad:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Reverse sweep from this node; seeds with ones (scalars) or ``grad``."""
        if not self.requires_grad:
            return
        order: list[Value] = []
        visited: set[int] = set()
        # iterative DFS: unrolled sequences are deeper than the recursion limit
        stack: list[tuple[Value, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without grad needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        self.grad = self.grad + _as_array(grad)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # arithmetic ---------------------------------------------------------

    def __add__(self, other) -> Value:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> Value:
        return sub(self, other)

    def __rsub__(self, other) -> Value:
        return sub(_lift(other), self)

    def __mul__(self, other) -> Value:
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Value:
        return scale(self, -1.0)

    def __matmul__(self, other) -> Value:
        return matmul(self, other)


class Param(Value):
    """A learnable leaf value."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


def constant(data) -> Value:
    return Value(data, requires_grad=False)


def _lift(x) -> Value:
    return x if isinstance(x, Value) else constant(x)


# binary ops ---------------------------------------------------------------

def add(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "add")
    out = Value(a.data + b.data, (a, b), "add")

    def _backward():
        a._accumulate(_unbroadcast(out.grad, a.shape))
        b._accumulate(_unbroadcast(out.grad, b.shape))
    out._backward = _backward
    return out


def sub(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "sub")
    out = Value(a.data - b.data, (a, b), "sub")

    def _backward():
        a._accumulate(_unbroadcast(out.grad, a.shape))
        b._accumulate(_unbroadcast(-out.grad, b.shape))
    out._backward = _backward
    return out


def mul(a, b) -> Value:
    """Hadamard product (numpy broadcasting allowed, e.g. ``(B,n) * (B,1)``)."""
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "mul")
    out = Value(a.data * b.data, (a, b), "mul")

    def _backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))
    out._backward = _backward
    return out


def matmul(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = Value(a.data @ b.data, (a, b), "matmul")

    def _backward():
        if a.requires_grad:
            a._accumulate(out.grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ out.grad)
    out._backward = _backward
    return out


# unary ops ----------------------------------------------------------------

def scale(a, c: float) -> Value:
    a = _lift(a)
    out = Value(a.data * c, (a,), "scale")
    out._backward = lambda: a._accumulate(out.grad * c)
    return out


def sigmoid(a) -> Value:
    a = _lift(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Value(y, (a,), "sigmoid")
    out._backward = lambda: a._accumulate(out.grad * y * (1.0 - y))
    return out


def tanh(a) -> Value:
    a = _lift(a)
    y = np.tanh(a.data)
    out = Value(y, (a,), "tanh")
    out._backward = lambda: a._accumulate(out.grad * (1.0 - y * y))
    return out


def relu(a) -> Value:
    a = _lift(a)
    keep = a.data > 0
    out = Value(np.where(keep, a.data, 0.0), (a,), "relu")
    out._backward = lambda: a._accumulate(out.grad * keep)
    return out


def log(a) -> Value:
    a = _lift(a)
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    out = Value(np.log(a.data), (a,), "log")
    out._backward = lambda: a._accumulate(out.grad / a.data)
    return out


def clip(a, lo: float, hi: float) -> Value:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    a = _lift(a)
    inside = (a.data >= lo) & (a.data <= hi)
    out = Value(np.clip(a.data, lo, hi), (a,), "clip")
    out._backward = lambda: a._accumulate(out.grad * inside)
    return out


def softmax(a) -> Value:
    a = _lift(a)
    if a.data.ndim == 0 or a.shape[-1] < 1:
        raise DimensionError(f"softmax needs at least one entry, got shape {a.shape}")
    if np.any(np.isnan(a.data)):
        raise NumericError("softmax input contains NaN")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Value(y, (a,), "softmax")

    def _backward():
        g = out.grad
        a._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))
    out._backward = _backward
    return out


def _cumsum(x: np.ndarray, forward: bool) -> np.ndarray:
    if forward:
        return np.cumsum(x, axis=-1)
    return np.flip(np.cumsum(np.flip(x, axis=-1), axis=-1), axis=-1)


def cumsum(a, direction: str = "forward") -> Value:
    """Cumulative sum along the last axis, left-to-right or right-to-left."""
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    a = _lift(a)
    fwd = direction == "forward"
    out = Value(_cumsum(a.data, fwd), (a,), f"cumsum_{direction}")
    out._backward = lambda: a._accumulate(_cumsum(out.grad, not fwd))
    return out


def concat(values: Sequence, axis: int = -1) -> Value:
    values = [_lift(v) for v in values]
    try:
        data = np.concatenate([v.data for v in values], axis=axis)
    except ValueError:
        shapes = ", ".join(str(v.shape) for v in values)
        raise DimensionError(f"concat: incompatible shapes {shapes}") from None
    out = Value(data, values, "concat")
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def _backward():
        for v, g in zip(values, np.split(out.grad, bounds, axis=axis)):
            v._accumulate(g)
    out._backward = _backward
    return out


def slice_last(a, start: int, stop: int) -> Value:
    """``a[..., start:stop]``."""
    a = _lift(a)
    out = Value(a.data[..., start:stop], (a,), "slice")

    def _backward():
        if a.requires_grad:
            a.grad[..., start:stop] += out.grad
    out._backward = _backward
    return out


def repeat_chunks(a, c: int) -> Value:
    """Repeat each last-axis entry ``c`` times: ``[1, 0] -> [1, 1, 0, 0]`` for c=2."""
    if c < 1:
        raise ValueError(f"chunk factor must be >= 1, got {c}")
    a = _lift(a)
    out = Value(np.repeat(a.data, c, axis=-1), (a,), "repeat_chunks")

    def _backward():
        g = out.grad
        a._accumulate(g.reshape(*g.shape[:-1], -1, c).sum(axis=-1))
    out._backward = _backward
    return out


def total(a) -> Value:
    """Sum of all entries, as a scalar."""
    a = _lift(a)
    out = Value(a.data.sum(), (a,), "sum")
    out._backward = lambda: a._accumulate(np.broadcast_to(out.grad, a.shape))
    return out


def mean(a, axis: int | None = None) -> Value:
    """Mean over ``axis`` (kept as a length-1 axis) or over everything."""
    a = _lift(a)
    if axis is None:
        n = a.data.size
        out = Value(a.data.mean(), (a,), "mean")
        out._backward = lambda: a._accumulate(np.broadcast_to(out.grad / n, a.shape))
        return out
    n = a.shape[axis]
    out = Value(a.data.mean(axis=axis, keepdims=True), (a,), "mean")
    out._backward = lambda: a._accumulate(np.broadcast_to(out.grad / n, a.shape))
    return out


# gradient checking ----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float] = field(default_factory=dict)
    max_abs_err: dict[str, float] = field(default_factory=dict)
    tol_rel: float = 1e-6
    eps: float = 1e-5
    extended: bool = False

    @property
    def passed(self) -> bool:
        return all(e <= self.tol_rel for e in self.max_rel_err.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tol_rel": self.tol_rel,
            "eps": self.eps,
            "extended_precision": self.extended,
            "max_rel_err": self.max_rel_err,
            "max_abs_err": self.max_abs_err,
        }


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def _scalar(v):
    x = v.data if isinstance(v, Value) else np.asarray(v)
    return np.asarray(x).reshape(())[()]


def grad_check(f: Callable[[], Value], params: Mapping[str, Value] | Iterable[Value],
               eps: float = 1e-5, tol_rel: float = 1e-6,
               extended: bool = False) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f()`` with central differences.

    ``f`` must rebuild its graph from the current parameter arrays on each
    call and be deterministic (freeze any dropout masks beforehand).

    In float64 the difference quotient carries roughly ``1e-16 * |f| / eps``
    of rounding noise, which swamps gradient entries below ~1e-7. With
    ``extended=True`` the perturbed evaluations run in ``np.longdouble``
    (80-bit on x86-64), lowering that floor by about three orders of
    magnitude; the analytic side stays float64.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(getattr(p, "name", "") or f"param{i}", p) for i, p in enumerate(params)]

    for _, p in named:
        p.zero_grad()
    out = f()
    if not np.isfinite(_scalar(out)):
        raise NumericError("objective is not finite at the base point")
    out.backward()
    analytic = {name: p.grad.copy() for name, p in named}

    report = GradCheckReport(tol_rel=tol_rel, eps=eps, extended=extended)
    saved = {name: p.data for name, p in named}
    try:
        if extended:
            for _, p in named:
                p.data = p.data.astype(np.longdouble)
        for name, p in named:
            numeric = np.zeros(p.shape)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                with no_grad():
                    flat[i] = orig + eps
                    fp = _scalar(f())
                    flat[i] = orig - eps
                    fm = _scalar(f())
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError(f"objective not finite when perturbing {name}[{i}]")
                numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
            _record(report, name, analytic[name], numeric)
    finally:
        for name, p in named:
            p.data = saved[name]
    return report


def _record(report: GradCheckReport, name: str, a: np.ndarray, numeric: np.ndarray) -> None:
    report.max_rel_err[name] = float(relative_error(a, numeric).max(initial=0.0))
    report.max_abs_err[name] = float(np.abs(a - numeric).max(initial=0.0))
