"""Adam with bias correction and a reduce-on-plateau learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0   # decoupled; default off (configs use explicit L2 loss terms)
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params):
    """One Adam update over ``params`` (in place). Parameters with no grad are skipped
    entirely: their moments stay untouched and they receive no weight decay."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p in params:
        if p.grad is None:
            continue
        key = p.name
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        g = p.grad
        state.m[key] = state.beta1 * state.m[key] + (1.0 - state.beta1) * g
        state.v[key] = state.beta2 * state.v[key] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[key] / bc1
        v_hat = state.v[key] / bc2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            p.data = p.data - state.lr * state.weight_decay * p.data


@dataclass
class PlateauScheduler:
    """Multiply lr by ``decay_factor`` after ``patience`` consecutive non-improving
    validation values, never below ``min_lr``."""
    lr: float
    min_lr: float = 1e-4
    decay_factor: float = 0.95
    patience: int = 10
    best_loss: float = float("inf")
    wait: int = 0

    def state_dict(self):
        return {"lr": self.lr, "min_lr": self.min_lr, "decay_factor": self.decay_factor,
                "patience": self.patience, "best_loss": self.best_loss, "wait": self.wait}

    @classmethod
    def from_state_dict(cls, d):
        return cls(**d)


def plateau_step(sched: PlateauScheduler, val_loss: float) -> float:
    """Feed one validation loss; returns the (possibly decayed) learning rate."""
    if val_loss < sched.best_loss:
        sched.best_loss = val_loss
        sched.wait = 0
    else:
        sched.wait += 1
        if sched.wait >= sched.patience:
            sched.lr = max(sched.min_lr, sched.lr * sched.decay_factor)
            sched.wait = 0
    return sched.lr
