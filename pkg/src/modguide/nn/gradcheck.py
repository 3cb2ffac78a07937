from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import NumericError
from .layers import Module
from .tensor import Tensor, shadow64


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``x``.

    Runs in float64. ``f`` must return a one-element tensor.
    """
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with shadow64():
        xt = Tensor(base.copy(), requires_grad=True)
        f(xt).backward()
        analytic = xt.grad.reshape(-1)
        numeric = np.empty_like(analytic)
        flat = base.reshape(-1)
        for i in range(flat.size):
            numeric[i] = _central(lambda: f(Tensor(flat.reshape(base.shape))).item(), flat, i, eps)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


def _central(evaluate: Callable[[], float], flat: np.ndarray, i: int, eps: float) -> float:
    orig = flat[i]
    try:
        flat[i] = orig + eps
        hi = evaluate()
        flat[i] = orig - eps
        lo = evaluate()
    except NumericError as e:
        raise NumericError(f"non-finite intermediate at coordinate {i}: {e}") from e
    finally:
        flat[i] = orig
    if not (np.isfinite(hi) and np.isfinite(lo)):
        raise NumericError(f"non-finite intermediate at coordinate {i}")
    return (hi - lo) / (2.0 * eps)


def grad_check_params(model: Module, loss_fn: Callable[[], Tensor], eps: float = 1e-6,
                      per_param: int = 4, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Finite-difference check of ``loss_fn`` against a sample of each parameter's coordinates.

    The model is cast to float64 for the check and left in float64; callers
    own a throwaway copy. Returns the max relative error per parameter name.
    """
    rng = rng or np.random.default_rng(0)
    model.astype(np.float64)
    errors: dict[str, float] = {}
    with shadow64():
        model.zero_grad()
        loss_fn().backward()
        for name, p in model.parameters().items():
            if not p.requires_grad:
                continue
            flat = p.data.reshape(-1)
            analytic = p.grad.reshape(-1)
            idx = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
            worst = 0.0
            for i in idx:
                num = _central(lambda: loss_fn().item(), flat, int(i), eps)
                worst = max(worst, abs(analytic[i] - num) / (abs(num) + 1e-8))
            errors[name] = worst
    return errors
