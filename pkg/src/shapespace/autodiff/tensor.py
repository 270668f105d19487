"""Dense float64 reverse-mode automatic differentiation.

A ``Tape`` records one forward pass; ``Tape.gradients`` replays it backwards.
Operations only build graph nodes while a tape is active, so evaluation code
runs at plain-numpy cost.  Every registered operation checks its output for
NaN/Inf and raises ``NonFiniteError`` on the first offender, which is what the
training loops rely on to abort cleanly.

Conventions:
  * everything is float64,
  * max/min reductions route gradient to the lowest-index extremum on ties,
  * ``arccos`` clamps its input to [-1+1e-6, 1-1e-6] before differentiation.
"""
from __future__ import annotations

import numpy as np

ARCCOS_CLAMP = 1e-6


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


_TAPE_STACK: list["Tape"] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Records operations for one forward pass (creation order is topological)."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def backward(self, root, seed=None):
        """Backpropagate from ``root`` (a scalar unless ``seed`` is given).

        Accumulates into ``.grad`` of every reachable leaf (tensors not created
        on this tape, e.g. Parameters and inputs).  Node grads internal to the
        tape are cleared first, so repeated calls with different roots/seeds
        are safe; leaf grads keep accumulating until ``zero_grad``.
        """
        if root._vjp is None and not root.requires_grad:
            raise ValueError("root does not depend on any differentiable tensor")
        if seed is None:
            if root.data.size != 1:
                raise ValueError("backward root must be scalar (or pass seed=)")
            seed = np.ones_like(root.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != root.data.shape:
                raise ValueError("seed shape %r != root shape %r" % (seed.shape, root.data.shape))
        on_tape = set(map(id, self.nodes))
        for node in self.nodes:
            node.grad = None
        root.grad = seed
        for node in reversed(self.nodes):
            g = node.grad
            if g is None or node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg
        # free intermediate grads but keep leaves (params/inputs)
        for node in self.nodes:
            if id(node) in on_tape and node is not root:
                if node._vjp is not None:
                    node.grad = None

    def gradients(self, root, wrt, seed=None):
        """Return gradients of ``root`` w.r.t. the tensors in ``wrt`` (zeroing first)."""
        for t in wrt:
            t.grad = None
        self.backward(root, seed=seed)
        return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self.name = name

    # -- plumbing ---------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def __repr__(self):
        head = "Parameter" if isinstance(self, Parameter) else "Tensor"
        return "%s(shape=%r, grad=%s)" % (head, self.data.shape, self.requires_grad)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ----------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis=axis, keepdims=keepdims)

    def min(self, axis=None, keepdims=False):
        return neg(max_(neg(self), axis=axis, keepdims=keepdims))


class Parameter(Tensor):
    """A named trainable leaf."""

    def __init__(self, data, name):
        super().__init__(data, requires_grad=True, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite value produced by op '%s'" % op)


def _make(out_data, parents, vjp, op):
    _check_finite(out_data, op)
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._vjp = vjp
        tape.nodes.append(out)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), vjp, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), vjp, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), vjp, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), vjp, "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def pow_const(a, p):
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(out, (a,), vjp, "pow")


def matmul(a, b):
    """Matrix product; supports 2D @ 2D, ND @ 2D, and equal-batch ND @ ND."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def vjp(g):
        ad, bd = a.data, b.data
        if bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        elif ad.ndim == 2 and bd.ndim > 2:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            gb = np.swapaxes(ad, -1, -2) @ g
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
            ga = _unbroadcast(ga, ad.shape)
            gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return _make(out, (a, b), vjp, "matmul")


# -- elementwise nonlinearities ---------------------------------------------

def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def vjp(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), vjp, "relu")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp, "exp")


def log(a):
    a = as_tensor(a)
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _make(out, (a,), vjp, "log")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), vjp, "sqrt")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), vjp, "tanh")


def softplus(a):
    """log(1 + exp(x)), computed stably."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        # sigmoid(x), stable in both tails
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
        return (g * s,)

    return _make(out, (a,), vjp, "softplus")


def abs_(a):
    a = as_tensor(a)
    out = np.abs(a.data)

    def vjp(g):
        return (g * np.sign(a.data),)

    return _make(out, (a,), vjp, "abs")


def arccos(a):
    """arccos with inputs clipped to [-1, 1], so values are exact at the
    endpoints; the gradient is zeroed where |x| > 1 - 1e-6 to avoid the
    endpoint singularity."""
    a = as_tensor(a)
    hi = 1.0 - ARCCOS_CLAMP
    inside = (a.data > -hi) & (a.data < hi)
    out = np.arccos(np.clip(a.data, -1.0, 1.0))

    def vjp(g):
        safe = np.where(inside, a.data, 0.0)
        d = -1.0 / np.sqrt(1.0 - safe * safe)
        return (g * np.where(inside, d, 0.0),)

    return _make(out, (a,), vjp, "arccos")


def clip(a, lo, hi):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def vjp(g):
        return (g * inside,)

    return _make(out, (a,), vjp, "clip")


def stop_gradient(a):
    """Detach: same values, no gradient flows back through this node."""
    a = as_tensor(a)
    return Tensor(a.data.copy())


# -- reductions --------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).copy(),)

    return _make(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.data.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / n, a.data.shape).copy(),)

    return _make(out, (a,), vjp, "mean")


def max_(a, axis=None, keepdims=False):
    """Max reduction; ties send the gradient to the lowest flat/axis index."""
    a = as_tensor(a)
    out = a.data.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        ga = np.zeros_like(a.data)
        if axis is None:
            idx = np.unravel_index(np.argmax(a.data), a.data.shape)
            ga[idx] = g if np.ndim(g) == 0 else g.item()
        else:
            am = np.argmax(a.data, axis=axis)           # first maximum on ties
            g2 = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(ga, np.expand_dims(am, axis), g2, axis=axis)
        return (ga,)

    return _make(out, (a,), vjp, "max")


def logsumexp(a, axis, keepdims=False):
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (g2 * (e / s),)

    return _make(out, (a,), vjp, "logsumexp")


# -- shape ops ----------------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make(out, (a,), vjp, "reshape")


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    out = np.swapaxes(a.data, ax1, ax2)

    def vjp(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _make(out, (a,), vjp, "swapaxes")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp, "concat")


def take(a, idx):
    """Basic and integer-array indexing; backward scatter-adds."""
    a = as_tensor(a)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, (a,), vjp, "take")
