"""Adam over tensor lists, plus the cosine and geometric schedules.

The Adam update follows the usual bias-corrected form with eps added after
the square root, so the very first step of a scalar parameter moves by
lr * |g| / (|g| + eps), essentially lr. State is held per tensor and updates
mutate the parameter arrays in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: list[np.ndarray], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        t=0,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float) -> None:
    """One in-place Adam update of every tensor."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ValueError("params/grads/state tensor counts differ")
    state.t += 1
    dt = params[0].dtype
    b1 = dt.type(state.beta1)
    b2 = dt.type(state.beta2)
    bc1 = dt.type(1.0 - state.beta1**state.t)
    bc2 = dt.type(1.0 - state.beta2**state.t)
    lr_t = dt.type(lr)
    eps = dt.type(state.eps)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + eps)


def cosine_warm_restart_lr(
    t: int, lr_max: float, lr_min: float = 0.0, t0: int = 100, t_mult: int = 1
) -> float:
    """Cosine annealing with warm restarts; t counts iterations from 0.

    Each cycle decays lr_max -> lr_min over its period, then snaps back.
    """
    if t0 < 1:
        raise ValueError(f"t0 must be >= 1, got {t0}")
    t_cur = t
    period = t0
    if t_mult == 1:
        t_cur = t % t0
    else:
        while t_cur >= period:
            t_cur -= period
            period *= t_mult
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * t_cur / period))


def lambda_at(t: float, total: float, start: float, end: float) -> float:
    """Geometric interpolation start -> end as t runs over [0, total]."""
    if start <= 0.0 or end <= 0.0:
        raise ValueError("geometric schedule needs positive endpoints")
    if total <= 0.0:
        return start
    frac = min(max(t / total, 0.0), 1.0)
    return start * (end / start) ** frac
