"""Invertible map between spectra and latent intrinsic codes.

``FlowModel`` is a stack of affine coupling layers (one-hidden-layer
conditioners), activation normalization, and fixed seeded feature
permutations; the last layer is a bare coupling with no norm or permutation.
Couplings start zero-initialized and actnorm starts as the identity, so a
fresh flow is the identity map up to feature reordering.  The log-determinant
accumulates exactly the coupling scales and actnorm scales, which makes exact
log-likelihoods under the standard-normal base density cheap:

    log P(v) = log N(f(v); 0, I) + logdet f(v).

Forward maps spectra to codes; ``flow_inverse`` runs the stack backwards and
is the spectrum predictor.  Both directions are differentiable, so losses may
pull on either end.  Activation normalization is initialized explicitly from
a data batch (``init_actnorm``); no call mutates the model implicitly.
"""
from __future__ import annotations

import numpy as np

from .autodiff import nn
from .autodiff import tensor as T
from .autodiff.tensor import NonFiniteError, Parameter

LOG_2PI = np.log(2.0 * np.pi)

# Floor on the per-dimension batch std used for actnorm initialization; a
# degenerate (constant) feature would otherwise produce an infinite scale.
ACTNORM_STD_FLOOR = 1e-8


class FlowNumericsError(NonFiniteError):
    """A flow layer produced a non-finite value (message names the layer)."""


class Coupling:
    """Affine coupling: the first ``k`` features condition a scale/shift of
    the rest.  ``k = ceil(n/2)``; scales are tanh-bounded so a single layer
    can stretch by at most e^{+-1}."""

    def __init__(self, n, hidden, rng, name):
        self.n = n
        self.k = (n + 1) // 2
        self.lin1 = nn.Linear(self.k, hidden, rng, name + ".h")
        self.lin2 = nn.Linear(hidden, 2 * (n - self.k), rng, name + ".st",
                              init="zero")

    def _scale_shift(self, xa):
        d = self.n - self.k
        st = self.lin2(T.relu(self.lin1(xa)))
        return T.tanh(st[:, :d]), st[:, d:]

    def forward(self, x):
        xa, xb = x[:, :self.k], x[:, self.k:]
        s, t = self._scale_shift(xa)
        return T.concat([xa, xb * T.exp(s) + t], axis=1), T.sum_(s, axis=1)

    def inverse(self, y):
        ya, yb = y[:, :self.k], y[:, self.k:]
        s, t = self._scale_shift(ya)
        return T.concat([ya, (yb - t) * T.exp(-s)], axis=1)

    def parameters(self):
        return self.lin1.parameters() + self.lin2.parameters()


class ActNorm:
    """Per-feature affine y = x * exp(log_s) + b with data-dependent init:
    after ``init_from`` the initializing batch maps to mean 0, std 1."""

    def __init__(self, n, name):
        self.log_s = Parameter(np.zeros(n), name + ".log_s")
        self.b = Parameter(np.zeros(n), name + ".b")
        self.initialized = False

    def init_from(self, x):
        m = x.mean(axis=0)
        s = np.maximum(x.std(axis=0), ACTNORM_STD_FLOOR)
        self.log_s.data = -np.log(s)
        self.b.data = -m / s
        self.initialized = True

    def forward(self, x):
        return x * T.exp(self.log_s) + self.b, T.sum_(self.log_s)

    def inverse(self, y):
        return (y - self.b) * T.exp(-self.log_s)

    def parameters(self):
        return [self.log_s, self.b]


class Permute:
    """Fixed feature reordering (volume preserving, no parameters)."""

    def __init__(self, perm):
        self.perm = np.asarray(perm, dtype=np.intp)
        self.inv = np.argsort(self.perm)

    def forward(self, x):
        return T.take(x, (slice(None), self.perm)), None

    def inverse(self, y):
        return T.take(y, (slice(None), self.inv))

    def parameters(self):
        return []


class FlowModel:
    """``depth`` coupling layers; all but the last are followed by actnorm
    and a seeded permutation (the permutations alternate which features get
    to condition the coupling in the next layer)."""

    def __init__(self, n, rng, depth=9, hidden=64, name="flow"):
        if n < 2:
            raise ValueError("flow dimension must be at least 2, got %d" % n)
        if depth < 1:
            raise ValueError("flow depth must be positive, got %d" % depth)
        self.n = n
        self.depth = depth
        self.layers = []
        for i in range(depth):
            self.layers.append(Coupling(n, hidden, rng, "%s.c%d" % (name, i)))
            if i < depth - 1:
                self.layers.append(ActNorm(n, "%s.a%d" % (name, i)))
                self.layers.append(Permute(rng.permutation(n)))

    def parameters(self):
        out = []
        for layer in self.layers:
            out += layer.parameters()
        return out

    def actnorm_initialized(self):
        return all(l.initialized for l in self.layers if isinstance(l, ActNorm))

    def permutations(self):
        """The feature orderings drawn at construction, outermost first.

        These are state, not parameters: a model rebuilt from a checkpoint
        must restore them (``set_permutations``) or the loaded weights sit
        behind different wiring.
        """
        return [l.perm.tolist() for l in self.layers
                if isinstance(l, Permute)]

    def set_permutations(self, perms):
        mine = [l for l in self.layers if isinstance(l, Permute)]
        if len(perms) != len(mine):
            raise ValueError("expected %d permutations, got %d"
                             % (len(mine), len(perms)))
        for layer, perm in zip(mine, perms):
            perm = np.asarray(perm, dtype=np.intp)
            if sorted(perm.tolist()) != list(range(self.n)):
                raise ValueError("not a permutation of %d features" % self.n)
            layer.perm = perm
            layer.inv = np.argsort(perm)

    def mark_initialized(self):
        """Flag actnorm layers as initialized (parameters restored externally,
        e.g. from a checkpoint)."""
        for layer in self.layers:
            if isinstance(layer, ActNorm):
                layer.initialized = True


def init_actnorm(flow: FlowModel, batch):
    """Data-dependent actnorm initialization from one batch (in place).

    Walks the stack in order so each actnorm normalizes the activations it
    actually sees.  Re-running re-initializes.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("actnorm init needs a (M >= 2, n) batch")
    for i, layer in enumerate(flow.layers):
        if isinstance(layer, ActNorm):
            layer.init_from(x)
        x = _run(layer.forward, T.Tensor(x), i)[0].data


def _run(fn, x, index):
    try:
        return fn(x)
    except NonFiniteError as e:
        raise FlowNumericsError("flow layer %d: %s" % (index, e)) from e


def flow_forward_t(flow: FlowModel, lam):
    """Tensor path: spectra (M, n) -> (codes (M, n), logdet (M,))."""
    x = T.as_tensor(lam)
    ld = T.Tensor(np.zeros(x.data.shape[0]))
    for i, layer in enumerate(flow.layers):
        x, d = _run(layer.forward, x, i)
        if d is not None:
            ld = ld + d
    return x, ld


def flow_inverse_t(flow: FlowModel, mu):
    """Tensor path: codes (M, n) -> spectra (M, n)."""
    x = T.as_tensor(mu)
    for i, layer in reversed(list(enumerate(flow.layers))):
        x = _run(layer.inverse, x, i)
    return x


def flow_loglik_t(flow: FlowModel, lam):
    """Per-sample log-density (M,) under the standard-normal base."""
    z, ld = flow_forward_t(flow, lam)
    return -0.5 * T.sum_(z * z, axis=1) - 0.5 * flow.n * LOG_2PI + ld


def _batched(v, n, what):
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    if single:
        v = v[None]
    if v.ndim != 2 or v.shape[1] != n:
        raise ValueError("%s must have %d features, got shape %r"
                         % (what, n, v.shape))
    return v, single


def flow_forward(flow: FlowModel, lam):
    """Numpy wrapper: (codes, logdet); a single spectrum gives (n,), scalar."""
    v, single = _batched(lam, flow.n, "spectrum")
    z, ld = flow_forward_t(flow, v)
    if single:
        return z.data[0], float(ld.data[0])
    return z.data, ld.data


def flow_inverse(flow: FlowModel, mu):
    v, single = _batched(mu, flow.n, "latent code")
    x = flow_inverse_t(flow, v)
    return x.data[0] if single else x.data


def flow_loglik(flow: FlowModel, lam):
    v, single = _batched(lam, flow.n, "spectrum")
    ll = flow_loglik_t(flow, v)
    return float(ll.data[0]) if single else ll.data
