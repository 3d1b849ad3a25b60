"""Adaptive-moment (Adam) optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ShapeError


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: OptimizerState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
) -> dict[str, np.ndarray]:
    """Return updated copies of ``params``; advances ``state`` in place.

    Parameters without an entry in ``grads`` are passed through untouched.
    """
    state.step += 1
    t = state.step
    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape mismatch for {name}", p.shape, g.shape)
        dt = p.dtype.type
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = dt(state.beta1) * m + dt(1 - state.beta1) * g
        v = dt(state.beta2) * v + dt(1 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        mhat = m / dt(1 - state.beta1**t)
        vhat = v / dt(1 - state.beta2**t)
        out[name] = p - dt(state.lr) * mhat / (np.sqrt(vhat) + dt(state.eps))
    return out


class Adam:
    """Thin stateful wrapper around :func:`adam_step`."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        self.state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        return adam_step(self.state, params, grads)
