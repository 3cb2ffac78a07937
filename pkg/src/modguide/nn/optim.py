from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import MissingGradientError
from .layers import Parameter


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Parameter], state: OptimizerState, lr: float | None = None) -> OptimizerState:
    """One bias-corrected Adam update of every trainable parameter, in place.

    ``lr`` overrides ``state.lr`` for this step (schedules).
    """
    trainable = {n: p for n, p in params.items() if p.requires_grad}
    for name, p in trainable.items():
        if p.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.betas
    lr = state.lr if lr is None else lr
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in trainable.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.data.dtype, copy=False)
    return state


def clip_grad_norm(params: dict[str, Parameter], max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.requires_grad and p.grad is not None]
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total
