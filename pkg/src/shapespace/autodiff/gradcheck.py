"""Finite-difference checking of reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor


def finite_difference_check(fn, point, h=1e-6):
    """Compare reverse-mode and central-difference gradients of ``fn`` at ``point``.

    ``fn`` maps a Tensor to a scalar Tensor and must be deterministic; it is
    called twice at the same point and any value mismatch raises ValueError.
    Returns max over coordinates of |analytic - central| / max(1, |analytic|).
    """
    x = Tensor(np.asarray(point, dtype=np.float64).copy(), requires_grad=True)
    with Tape() as tape:
        y = fn(x)
    y2 = fn(Tensor(x.data.copy(), requires_grad=False))
    if float(y.data) != float(y2.data):
        raise ValueError("fn is not deterministic across two calls at the same point")
    (analytic,) = tape.gradients(y, [x])

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(Tensor(x.data, requires_grad=False)).data)
        flat[i] = orig - h
        fm = float(fn(Tensor(x.data, requires_grad=False)).data)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    numeric = numeric.reshape(x.data.shape)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_difference_check_params(fn, params, h=1e-6):
    """Same check, but for a zero-argument ``fn`` against a list of Parameters.

    Returns the max relative error over every coordinate of every parameter.
    """
    with Tape() as tape:
        y = fn()
    if float(fn().data) != float(y.data):
        raise ValueError("fn is not deterministic across two calls")
    grads = tape.gradients(y, params)

    worst = 0.0
    for p, analytic in zip(params, grads):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(1.0, abs(a))
            worst = max(worst, err)
    return worst
