"""Adam and Polyak target averaging."""
from __future__ import annotations

import numpy as np

from .params import ParamSet, check_shapes_match
from .tensor import ContractError


class AdamState:
    """Per-ParamSet Adam moments; step counter strictly increases."""

    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(state: AdamState, params: ParamSet):
    """One Adam update from the gradients stored on `params`.

    Frozen ParamSets are left untouched. Trainable parameters without a
    gradient are a contract error (a missing backward call, usually).
    """
    if params.frozen:
        return
    state.step_count += 1
    t = state.step_count
    b1 = np.float32(state.beta1)
    b2 = np.float32(state.beta2)
    corr1 = np.float32(1.0 - state.beta1**t)
    corr2 = np.float32(1.0 - state.beta2**t)
    lr = np.float32(state.lr)
    eps = np.float32(state.eps)
    step_scale = np.float32(lr / corr1)
    vcorr = np.float32(1.0 / corr2)
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"missing gradient for trainable parameter {name!r}")
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (np.float32(1.0) - b1) * g
        v *= b2
        v += (np.float32(1.0) - b2) * g * g
        denom = np.sqrt(v * vcorr)
        denom += eps
        update = m * step_scale
        update /= denom
        p.data = p.data - update


def polyak_update(target: ParamSet, online: ParamSet, tau: float):
    """target <- (1 - tau) * target + tau * online, elementwise."""
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"tau must be in [0, 1], got {tau}")
    check_shapes_match(target, online)
    t = np.float32(tau)
    one_minus = np.float32(1.0 - tau)
    for name, p in target.items():
        p.data = one_minus * p.data + t * online[name].data
