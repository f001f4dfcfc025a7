"""Reverse-mode automatic differentiation over numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. Tensors carry a
monotonically increasing creation index, so sorting the reachable graph by
that index in descending order visits every node after all of its consumers.
"""

from __future__ import annotations

import builtins
import contextlib
import itertools
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_counter = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class GradcheckError(RuntimeError):
    pass


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (``float64`` for gradient checks)."""
    prev = default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no graph records inside the block (inference)."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating) or arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._id = next(_counter)
        self.op = "leaf"
        self.name = name

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._id = next(_counter)
        out.op = op
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def backward(self) -> None:
        backward(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tape(loss: Tensor) -> list:
    """Graph records reachable from ``loss``, in creation (topological) order."""
    seen = {id(loss): loss}
    stack = [loss]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t._id)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from a scalar ``loss`` that requires gradient."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    """Same-rank broadcasting where differing axes must be singleton on one side."""
    if a == b:
        return a
    if len(a) != len(b):
        raise ShapeError(f"rank mismatch {a} vs {b}")
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"cannot broadcast {a} with {b}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._make(ad * bd, (a, b), bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._make(out, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    xd = x.data
    return Tensor._make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def neg(x: Tensor) -> Tensor:
    return Tensor._make(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return Tensor._make(x.data * c, (x,), lambda g: (g * c,), "scale")


# ----------------------------------------------------------------- reductions


def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def _check_nonempty(x: Tensor, axes: tuple) -> None:
    if any(x.shape[a] == 0 for a in axes) or (not axes and x.data.size == 0):
        raise DomainError("reduction over an empty extent")


def sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axes, x.ndim)
    _check_nonempty(x, axes)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, x.ndim)
    _check_nonempty(x, axes)
    n = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axes, keepdims), 1.0 / n)


def max(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max reduction; the gradient goes wholly to the lowest-index maximal element."""
    axes = _norm_axes(axes, x.ndim)
    _check_nonempty(x, axes)
    keep = tuple(a for a in range(x.ndim) if a not in axes)
    moved = np.transpose(x.data, keep + axes)
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    idx = np.argmax(flat, axis=-1)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = vals
    if keepdims:
        out = np.expand_dims(vals, axes)
    shape = x.shape

    def bw(g):
        g = g.reshape(lead)
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gm = gflat.reshape(moved.shape)
        inv = np.argsort(keep + axes)
        return (np.transpose(gm, inv).reshape(shape),)

    return Tensor._make(np.asarray(out), (x,), bw, "max")


def logsumexp(x: Tensor, axis: int = 1, keepdims: bool = True) -> Tensor:
    """``m + log(sum(exp(x - m)))`` along one axis, with ``m`` the axis max."""
    axis = _norm_axes(axis, x.ndim)[0]
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    p = e / s

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * p,)

    return Tensor._make(out if keepdims else np.squeeze(out, axis), (x,), bw, "logsumexp")


# ------------------------------------------------------------------ structure


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; zero gradient backward.

    The edge to ``x`` is kept so that ancestors reached only through blocked
    edges still end up with an explicit all-zero gradient.
    """
    frozen = _frozen_lookup(x.data)
    return Tensor._make(frozen, (x,), lambda g: (np.zeros_like(x.data),), "stop_gradient")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def expand(x: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``x`` along a new leading axis."""
    out = np.broadcast_to(x.data, (n,) + x.shape).copy()
    return Tensor._make(out, (x,), lambda g: (g.sum(axis=0),), "expand")


def constant_like(x: Tensor, value: float) -> Tensor:
    return Tensor(np.full(x.shape, value, dtype=x.dtype))


def zeros_like(x: Tensor) -> Tensor:
    return constant_like(x, 0.0)


def ones_like(x: Tensor) -> Tensor:
    return constant_like(x, 1.0)


# ----------------------------------------------------- frozen stop-gradients
#
# Finite differences see every path, including blocked ones, while the
# analytic gradient skips blocked edges. Recording stop_gradient outputs at
# the unperturbed point and replaying them during perturbed evaluations makes
# the numeric derivative describe the same surrogate the analytic one does.


class _StopRecorder:
    def __init__(self):
        self.values: list = []
        self.replay = False
        self.pos = 0


def _frozen_lookup(data: np.ndarray) -> np.ndarray:
    rec = getattr(_local, "stops", None)
    if rec is None:
        return data
    if rec.replay:
        val = rec.values[rec.pos]
        rec.pos += 1
        return val
    rec.values.append(data.copy())
    return data


@contextlib.contextmanager
def _stops(rec: _StopRecorder):
    prev = getattr(_local, "stops", None)
    _local.stops = rec
    try:
        yield
    finally:
        _local.stops = prev


# ------------------------------------------------------------ gradient check


def gradient_check(
    f: Callable[..., Tensor],
    inputs: Iterable[Tensor] | Tensor,
    eps: float = 1e-6,
    coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    freeze_stops: bool = True,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the inputs to a tensor; its sum is the scalar being
    differentiated. Error per coordinate is
    ``|a - n| / max(1, |a| + |n|)``. With ``coords`` set, only that many
    randomly chosen coordinates per input are probed. Values passing through
    ``stop_gradient`` are held at their unperturbed values when
    ``freeze_stops`` is true.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    rng = rng or np.random.default_rng(0)
    rec = _StopRecorder()

    def evaluate() -> float:
        out = f(*inputs)
        val = float(np.sum(out.data, dtype=np.float64))
        if not np.isfinite(val):
            raise GradcheckError("function is non-finite at a probed point")
        return val

    for t in inputs:
        t.grad = None
        t.requires_grad = True
    with _stops(rec) if freeze_stops else contextlib.nullcontext():
        out = f(*inputs)
        loss = sum(out)
        backward(loss)
    rec.replay = True

    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        picks = range(n) if coords is None or coords >= n else rng.choice(n, coords, replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            rec.pos = 0
            with _stops(rec) if freeze_stops else contextlib.nullcontext():
                fp = evaluate()
            flat[i] = orig - eps
            rec.pos = 0
            with _stops(rec) if freeze_stops else contextlib.nullcontext():
                fm = evaluate()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - num) / builtins.max(1.0, abs(a) + abs(num))
            worst = builtins.max(worst, err)
    return worst

