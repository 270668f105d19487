"""Layers: Linear, LayerNorm, BatchNorm, MLP stacks, and a PointNet encoder.

``MLP.forward`` can record a per-layer cache which ``mlp_jacobian`` replays to
build the full input-output Jacobian as a taped tensor (exact rows, one
reverse sweep per layer, batched over output coordinates).  That keeps
Frobenius-norm penalties on Jacobians differentiable without a second-order
engine: ReLU masks are piecewise constant and everything else (weights,
layer-norm statistics) stays live on the tape.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

LN_EPS = 1e-5
BN_EPS = 1e-5


def he_init(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def linear_init(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, fan_out))


class Linear:
    def __init__(self, n_in, n_out, rng, name, init="he"):
        if init == "he":
            w = he_init(rng, n_in, n_out)
        elif init == "linear":
            w = linear_init(rng, n_in, n_out)
        elif init == "zero":
            w = np.zeros((n_in, n_out))
        else:
            raise ValueError("unknown init %r" % init)
        self.W = Parameter(w, name + ".W")
        self.b = Parameter(np.zeros(n_out), name + ".b")

    def __call__(self, x):
        return T.matmul(x, self.W) + self.b

    def parameters(self):
        return [self.W, self.b]


class LayerNorm:
    """Normalizes over the last axis, then applies a learned gain and bias."""

    def __init__(self, dim, name):
        self.g = Parameter(np.ones(dim), name + ".g")
        self.b = Parameter(np.zeros(dim), name + ".b")

    def __call__(self, x, cache=None):
        mu = T.mean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = T.mean(centered * centered, axis=-1, keepdims=True)
        sigma = T.sqrt(var + LN_EPS)
        xhat = centered / sigma
        if cache is not None:
            cache.append(("ln", self, sigma, xhat))
        return xhat * self.g + self.b

    def parameters(self):
        return [self.g, self.b]


class BatchNorm:
    """Batch statistics while training, running averages at evaluation."""

    def __init__(self, dim, name, momentum=0.9):
        self.g = Parameter(np.ones(dim), name + ".g")
        self.b = Parameter(np.zeros(dim), name + ".b")
        self.running_mean = Tensor(np.zeros(dim), name=name + ".running_mean")
        self.running_var = Tensor(np.ones(dim), name=name + ".running_var")
        self.momentum = momentum

    def __call__(self, x, train):
        if train:
            mu = T.mean(x, axis=0, keepdims=True)
            centered = x - mu
            var = T.mean(centered * centered, axis=0, keepdims=True)
            m = self.momentum
            self.running_mean.data = m * self.running_mean.data + (1 - m) * mu.data[0]
            self.running_var.data = m * self.running_var.data + (1 - m) * var.data[0]
            return centered / T.sqrt(var + BN_EPS) * self.g + self.b
        rm, rv = self.running_mean.data, self.running_var.data
        return (x - rm) * (1.0 / np.sqrt(rv + BN_EPS)) * self.g + self.b

    def parameters(self):
        return [self.g, self.b]

    def buffers(self):
        return [self.running_mean, self.running_var]


class MLP:
    """Linear stacks with optional per-hidden-layer norm and ReLU.

    ``norm`` is "ln", "bn", or None; the final layer is always a bare Linear.
    """

    def __init__(self, n_in, hidden, n_out, rng, name, norm="ln", final_init="linear"):
        self.layers = []
        self.norm = norm
        d = n_in
        for i, h in enumerate(hidden):
            lname = "%s.%d" % (name, i)
            lin = Linear(d, h, rng, lname)
            nl = None
            if norm == "ln":
                nl = LayerNorm(h, lname + ".ln")
            elif norm == "bn":
                nl = BatchNorm(h, lname + ".bn")
            self.layers.append((lin, nl))
            d = h
        self.final = Linear(d, n_out, rng, name + ".out", init=final_init)
        self.n_in, self.n_out = n_in, n_out

    def __call__(self, x, train=False, cache=None):
        for lin, nl in self.layers:
            x = lin(x)
            if cache is not None:
                cache.append(("linear", lin))
            if isinstance(nl, LayerNorm):
                x = nl(x, cache=cache)
            elif isinstance(nl, BatchNorm):
                if cache is not None:
                    raise ValueError("jacobian cache unsupported through batch norm")
                x = nl(x, train)
            pre = x
            x = T.relu(x)
            if cache is not None:
                cache.append(("relu", pre))
        x = self.final(x)
        if cache is not None:
            cache.append(("linear", self.final))
        return x

    def parameters(self):
        out = []
        for lin, nl in self.layers:
            out += lin.parameters()
            if nl is not None:
                out += nl.parameters()
        out += self.final.parameters()
        return out

    def buffers(self):
        out = []
        for _, nl in self.layers:
            if isinstance(nl, BatchNorm):
                out += nl.buffers()
        return out


def mlp_jacobian(cache, upstream=None):
    """Jacobian of a cached MLP forward as a taped tensor of shape (B, K, n_in).

    ``cache`` comes from ``MLP.__call__(x, cache=[])``.  ``upstream`` seeds the
    reverse sweep with shape (B, K, n_out); identity rows by default, so the
    result is the exact Jacobian d out / d in per batch element.  Chains
    compose by passing one MLP's result as the next one's upstream.

    The batch axis enters through relu/ln cache entries (linears are
    batch-independent), so a purely affine chain with default seeding
    collapses to (K, n_in): one Jacobian shared by every batch element.
    """
    if upstream is None:
        kind, lin = cache[-1]
        assert kind == "linear"
        n_out = lin.W.data.shape[1]
        eye = np.eye(n_out)
        upstream = None  # replaced by identity on the first linear below
        G = None
    else:
        G = upstream
        eye = None
    for entry in reversed(cache):
        kind = entry[0]
        if kind == "linear":
            lin = entry[1]
            Wt = T.swapaxes(lin.W, 0, 1)
            if G is None:
                G = Tensor(np.broadcast_to(eye, eye.shape).copy())
                G = T.matmul(G, Wt)
            else:
                G = T.matmul(G, Wt)
        elif kind == "relu":
            pre = entry[1]
            mask = (pre.data > 0).astype(np.float64)
            G = G * Tensor(mask[:, None, :])
        elif kind == "ln":
            _, layer, sigma, xhat = entry
            H = G * T.reshape(layer.g, (1, 1, -1))
            d = xhat.data.shape[-1]
            xh = T.reshape(xhat, (xhat.data.shape[0], 1, d))
            sig = T.reshape(sigma, (sigma.data.shape[0], 1, 1))
            mean_h = T.mean(H, axis=-1, keepdims=True)
            mean_hx = T.mean(H * xh, axis=-1, keepdims=True)
            G = (H - mean_h - xh * mean_hx) / sig
        else:
            raise ValueError("unknown cache entry %r" % kind)
    return G


def l2_squared(params):
    """Sum of squared entries over a parameter list (explicit weight-decay term)."""
    total = None
    for p in params:
        s = T.sum_(p * p)
        total = s if total is None else total + s
    if total is None:
        return T.Tensor(np.zeros(()))
    return total


def normalize_rows(x, eps=1e-12):
    """Rows scaled to unit L2 norm (safe at the origin)."""
    n = T.sqrt(T.sum_(x * x, axis=-1, keepdims=True) + eps)
    return x / n


class PointNet:
    """Per-point MLP + max pool over the point axis + fully connected head.

    Input (B, N, 3), output (B, n_out).  Per-point and head hidden layers use
    batch norm + ReLU; the output layer is a bare Linear.
    """

    def __init__(self, point_hidden, head_hidden, n_out, rng, name, n_in=3):
        self.point_layers = []
        d = n_in
        for i, h in enumerate(point_hidden):
            lname = "%s.pt%d" % (name, i)
            self.point_layers.append((Linear(d, h, rng, lname),
                                      BatchNorm(h, lname + ".bn")))
            d = h
        self.pooled_dim = d
        self.head_layers = []
        for i, h in enumerate(head_hidden):
            lname = "%s.hd%d" % (name, i)
            self.head_layers.append((Linear(d, h, rng, lname),
                                     BatchNorm(h, lname + ".bn")))
            d = h
        self.final = Linear(d, n_out, rng, name + ".out", init="linear")
        self.n_out = n_out

    def __call__(self, P, train=False):
        B, N, _ = P.data.shape
        x = T.reshape(P, (B * N, P.data.shape[2]))
        for lin, bn in self.point_layers:
            x = T.relu(bn(lin(x), train))
        x = T.reshape(x, (B, N, self.pooled_dim))
        x = T.max_(x, axis=1)                      # global feature, ties -> lowest index
        for lin, bn in self.head_layers:
            x = T.relu(bn(lin(x), train))
        return self.final(x)

    def parameters(self):
        out = []
        for lin, bn in self.point_layers + self.head_layers:
            out += lin.parameters() + bn.parameters()
        out += self.final.parameters()
        return out

    def buffers(self):
        out = []
        for _, bn in self.point_layers + self.head_layers:
            out += bn.buffers()
        return out
