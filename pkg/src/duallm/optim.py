"""Nadam and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import global_norm


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    ``max_norm == 0`` disables clipping.
    """
    if max_norm < 0:
        raise ValueError(f"max_norm must be >= 0, got {max_norm}")
    if max_norm == 0:
        return grads
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= g.dtype.type(factor)
    return grads


@dataclass
class NadamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def nadam_step(store, state: NadamState) -> NadamState:
    """One Nadam update over every parameter in ``store`` that holds a gradient.

    With bias corrections ``mh = m / (1 - b1^t)`` and ``vh = v / (1 - b2^t)``
    the step is ``lr * (b1*mh + (1-b1)*g/(1-b1^t)) / (sqrt(vh) + eps)``.
    Tied parameters share one storage and so one (summed) gradient.
    """
    live = [(name, p) for name, p in store.items() if p.grad is not None]
    if not live:
        raise RuntimeError("nadam_step called without any gradients")
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for name, p in live:
        g = p.grad
        dt = p.data.dtype.type
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * g * g
        nesterov = dt(b1 / c1) * m + dt((1 - b1) / c1) * g
        p.data -= dt(state.lr) * nesterov / (np.sqrt(v / dt(c2)) + dt(state.eps))
    return state
