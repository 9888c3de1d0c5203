"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op that touches a tensor with ``requires_grad`` records its parents and a
backward closure on the output.  Each tensor carries a creation sequence
number, so replaying the recorded nodes in descending sequence order is the
reverse of the order in which they were recorded (see :class:`Tape`).
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_sequence = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        listed = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_sequence)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("add", neg(self), other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result; ``backward_fn(g)`` returns one gradient (or None) per parent."""
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == np.float64 else data.astype(np.float64)
    out.grad = None
    out.name = None
    out._seq = next(_sequence)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


class Tape:
    """The recorded operations reachable from ``root``, in recording order."""

    def __init__(self, root: Tensor):
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    def ops(self) -> list[Tensor]:
        return [t for t in self.nodes if t._backward is not None]

    def replay(self, root: Tensor, seed: np.ndarray):
        grads: dict[int, np.ndarray] = {id(root): seed}
        for t in reversed(self.nodes):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._backward is None:
                if t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor):
    """Accumulate dloss/dleaf into ``.grad`` of every reachable leaf with requires_grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a single-element loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("backward on a tensor with no recorded operations or trainable leaves")
    tape = Tape(loss)
    tape.replay(loss, np.ones_like(loss.data))


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


# --------------------------------------------------------------------------
# elementwise ops


def _unscalar(g: np.ndarray, ref: Tensor) -> np.ndarray:
    # gradient of a broadcast scalar tensor
    if ref.data.shape == g.shape:
        return g
    return np.asarray(g.sum()).reshape(ref.data.shape)


def _is_scalar_tensor(t: Tensor) -> bool:
    return t.data.ndim == 0


def elementwise(kind: str, a, b=None) -> Tensor:
    """Apply ``kind`` in {add, sub, mul, div, max, exp, log} elementwise.

    ``b`` is a tensor of the same shape, a 0-d tensor or a Python scalar.
    For ``max`` the gradient goes to ``a`` wherever ``a >= b``.
    """
    a = as_tensor(a)
    if kind == "exp":
        out = np.exp(a.data)
        return make_result(out, (a,), lambda g: (g * out,))
    if kind == "log":
        return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))
    if b is None:
        raise ValueError(f"elementwise {kind!r} needs a second operand")
    b = as_tensor(b)
    if a.shape != b.shape and not (_is_scalar_tensor(a) or _is_scalar_tensor(b)):
        raise ShapeError(kind, a.shape, b.shape)
    x, y = a.data, b.data
    if kind == "add":
        return make_result(x + y, (a, b), lambda g: (_unscalar(g, a), _unscalar(g, b)))
    if kind == "sub":
        return make_result(x - y, (a, b), lambda g: (_unscalar(g, a), _unscalar(-g, b)))
    if kind == "mul":
        return make_result(x * y, (a, b), lambda g: (_unscalar(g * y, a), _unscalar(g * x, b)))
    if kind == "div":
        return make_result(
            x / y, (a, b), lambda g: (_unscalar(g / y, a), _unscalar(-g * x / (y * y), b))
        )
    if kind == "max":
        pick_a = x >= y
        return make_result(
            np.where(pick_a, x, y),
            (a, b),
            lambda g: (_unscalar(np.where(pick_a, g, 0.0), a), _unscalar(np.where(pick_a, 0.0, g), b)),
        )
    raise ValueError(f"unknown elementwise op {kind!r}")


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def div(a, b):
    return elementwise("div", a, b)


def maximum(a, b):
    return elementwise("max", a, b)


def exp(a):
    return elementwise("exp", a)


def log(a):
    return elementwise("log", a)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return make_result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


# --------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def back(g):
        return (np.broadcast_to(np.reshape(g, kept), a.shape).copy(),)

    return make_result(np.asarray(out), (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flip(a: Tensor, axis: int) -> Tensor:
    return make_result(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty sequence")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        index = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[ax] = slice(lo, hi)
            parts.append(g[tuple(index)])
        return parts

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tensors, back)
