"""Minimal reverse-mode automatic differentiation on float64 arrays.

A :class:`Tensor` wraps a numpy array.  While recording is active (the
default), every primitive applied to a tensor that requires gradients
attaches a :class:`TapeNode` holding its parents and a vector-Jacobian
product closure.  :func:`backward` walks the graph reachable from a scalar
root in reverse topological order.  The graph lives on the tensors
themselves, so it is released together with them.

Elementwise primitives broadcast like numpy; the matrix product is
``matvec(W, x)`` which maps a batch of vectors ``x[..., n]`` through
``W[m, n]``.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from . import special

__all__ = [
    "Tensor", "TapeNode", "ShapeError", "NonFiniteError", "tensor",
    "no_grad", "is_recording", "backward", "gradient_check",
    "add", "sub", "mul", "div", "neg", "matvec", "concat", "sigmoid",
    "tanh", "silu", "relu", "softmax", "log_softmax", "log", "exp",
    "lgamma", "digamma", "sum", "mean", "maximum", "minimum", "clip",
    "square", "pick", "PRIMITIVES",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's signature."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(FloatingPointError):
    pass


_local = threading.local()


def is_recording():
    return getattr(_local, "recording", True)


@contextmanager
def no_grad():
    """Suspend graph recording in the current thread."""
    prev = is_recording()
    _local.recording = False
    try:
        yield
    finally:
        _local.recording = prev


class TapeNode:
    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op, parents, vjp):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self.node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor({self.data!r}{tag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op, data, parents, vjp):
    out = Tensor(data)
    if is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = TapeNode(op, parents, vjp)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(op, fn, a, b):
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make("add", _binary("add", np.add, a, b), (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make("sub", _binary("sub", np.subtract, a, b), (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make("mul", _binary("mul", np.multiply, a, b), (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = _binary("div", np.divide, a, b)
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a):
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def square(a):
    a = _as_tensor(a)
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def matvec(w, x):
    """``y[..., i] = sum_j w[i, j] * x[..., j]``."""
    w, x = _as_tensor(w), _as_tensor(x)
    if w.ndim != 2 or x.ndim == 0 or x.shape[-1] != w.shape[1]:
        raise ShapeError("matvec", w.shape, x.shape)

    def vjp(g):
        gx = g @ w.data
        if x.ndim == 1:
            gw = np.outer(g, x.data)
        else:
            gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        return gw, gx

    return _make("matvec", x.data @ w.data.T, (w, x), vjp)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make("concat", out, tuple(tensors), vjp)


def _is_basic(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def _getitem(a, index):
    out = a.data[index]
    basic = _is_basic(index)

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make("getitem", out, (a,), vjp)


def pick(a, index):
    """Select ``a[i, index[i]]`` along the last axis of a 2-D tensor."""
    a = _as_tensor(a)
    index = np.asarray(index)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError("pick", a.shape, index.shape)
    rows = np.arange(a.shape[0])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return _make("pick", a.data[rows, index], (a,), vjp)


def sigmoid(a):
    a = _as_tensor(a)
    s = expit(a.data)
    return _make("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a):
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _make("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def silu(a):
    a = _as_tensor(a)
    s = expit(a.data)
    return _make("silu", a.data * s, (a,),
                 lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softmax(a):
    """Softmax over the last axis."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make("softmax", s, (a,), vjp)


def log_softmax(a):
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (a,), vjp)


def log(a):
    a = _as_tensor(a)
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a):
    a = _as_tensor(a)
    e = np.exp(a.data)
    return _make("exp", e, (a,), lambda g: (g * e,))


def lgamma(a):
    a = _as_tensor(a)
    return _make("lgamma", special.lgamma(a.data), (a,),
                 lambda g: (g * special.digamma(a.data),))


def digamma(a):
    a = _as_tensor(a)
    return _make("digamma", special.digamma(a.data), (a,),
                 lambda g: (g * special.trigamma(a.data),))


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), vjp)


def mean(a, axis=None):
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make("mean", out, (a,), vjp)


def maximum(a, b):
    """Elementwise max; ties send the gradient to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = _binary("maximum", np.maximum, a, b)
    take_a = a.data >= b.data
    return _make("maximum", out, (a, b),
                 lambda g: (_unbroadcast(g * take_a, a.shape),
                            _unbroadcast(g * ~take_a, b.shape)))


def minimum(a, b):
    """Elementwise min; ties send the gradient to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = _binary("minimum", np.minimum, a, b)
    take_a = a.data <= b.data
    return _make("minimum", out, (a, b),
                 lambda g: (_unbroadcast(g * take_a, a.shape),
                            _unbroadcast(g * ~take_a, b.shape)))


def clip(a, lo, hi):
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "square": square, "matvec": matvec, "concat": concat,
    "sigmoid": sigmoid, "tanh": tanh, "silu": silu, "relu": relu,
    "softmax": softmax, "log_softmax": log_softmax, "log": log, "exp": exp,
    "lgamma": lgamma, "digamma": digamma, "sum": sum, "mean": mean,
    "maximum": maximum, "minimum": minimum, "clip": clip, "pick": pick,
}


# ---------------------------------------------------------------------------
# backward pass


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(root):
    """Gradients of a scalar ``root`` with respect to every leaf it depends on.

    Returns a dict keyed by leaf :class:`Tensor` (identity hashed).  The graph
    is left intact, so calling again gives identical results.
    """
    if root.data.size != 1:
        raise ShapeError("backward", root.shape)
    if not root.requires_grad:
        return {}
    grads = {id(root): np.ones_like(root.data)}
    leaves = {}
    for t in reversed(_topological(root)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            leaves[t] = g
            continue
        for p, gp in zip(t.node.parents, t.node.vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp
    return leaves


def gradient_check(f, x, step=1e-5, coords=None, order=2):
    """Max relative error between autodiff and central differences.

    ``f`` maps a Tensor to a scalar Tensor; ``x`` is a Tensor or array.
    ``coords`` optionally restricts the comparison to a subset of flat
    indices of ``x``.  ``order=4`` uses the five-point central stencil,
    whose smaller truncation error permits a larger, roundoff-safe step.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if step <= 0:
        raise ValueError("step must be positive")
    leaf = Tensor(x.copy(), requires_grad=True)
    out = f(leaf)
    grads = backward(out)
    analytic = grads.get(leaf, np.zeros_like(x)).ravel()
    flat = x.ravel()
    idx = range(flat.size) if coords is None else coords
    offsets = (1.0, -1.0) if order == 2 else (2.0, 1.0, -1.0, -2.0)
    weights = (0.5, -0.5) if order == 2 else (-1 / 12, 8 / 12, -8 / 12, 1 / 12)
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            numeric = 0.0
            for k, w in zip(offsets, weights):
                flat[i] = orig + k * step
                val = float(f(Tensor(x)).data)
                if not np.isfinite(val):
                    flat[i] = orig
                    raise NonFiniteError(f"non-finite function value at coordinate {i}")
                numeric += w * val
            flat[i] = orig
            numeric /= step
            err = abs(analytic[i] - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, err)
    return worst
