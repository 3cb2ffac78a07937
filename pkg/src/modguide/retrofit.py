"""Adding a pooled-embedding path to a model trained without one.

A small adapter maps the pooled embedding into the timestep-embedding space.
Its contribution is ``g(e) = f(e) - f(0)``, so a zero pooled embedding leaves
the base model's computation untouched. The adapter is trained by
distillation: the frozen base sees the prompt through its token sequence
(teacher), the student sees only null tokens plus the adapter's pooled path,
and the loss is the mean squared difference of their velocity predictions on
the same noised image.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .dit import DiT
from .errors import CheckpointError, ConfigError, DimensionError, DivergenceError, FrozennessError
from .nn import OptimizerState, adam_step, clip_grad_norm, no_grad
from .nn import tensor as T
from .nn.layers import Linear, Module
from .nn.tensor import Tensor
from .toyworld import ToyDataset, encode_batch

log = logging.getLogger(__name__)


class PooledAdapter(Module):
    def __init__(self, d_pool: int, t_dim: int, d_adapter: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.d_pool, self.t_dim, self.d_adapter = d_pool, t_dim, d_adapter
        self.fc1 = Linear(d_pool, d_adapter, rng)
        self.fc2 = Linear(d_adapter, t_dim, rng)

    def raw(self, e: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(e)))

    def __call__(self, pooled) -> Tensor:
        return adapter_contribution(self, pooled)

    def config(self) -> dict:
        return {"d_pool": self.d_pool, "t_dim": self.t_dim, "d_adapter": self.d_adapter}


def adapter_contribution(adapter: PooledAdapter, pooled) -> Tensor:
    """g(e) = f(e) - f(0), [B, t_dim]; f(0) is recomputed so g(0) = 0 survives training."""
    e = np.atleast_2d(np.asarray(pooled.data if isinstance(pooled, Tensor) else pooled, T.default_dtype()))
    if e.shape[-1] != adapter.d_pool:
        raise DimensionError(f"pooled width {e.shape[-1]} != adapter input {adapter.d_pool}")
    f_e = adapter.raw(Tensor(e))
    f_0 = adapter.raw(Tensor(np.zeros((1, adapter.d_pool))))
    # BLAS may round a zero row differently at another batch size, so pin g(0) explicitly
    live = e.any(axis=-1, keepdims=True)
    return T.where_rows(live, f_e - f_0, Tensor(np.zeros((e.shape[0], adapter.t_dim), f_e.data.dtype)))


class RetrofitModel:
    """A frozen base model whose timestep embedding is shifted by the adapter."""

    def __init__(self, base: DiT, adapter: PooledAdapter):
        if adapter.t_dim != base.cfg.t_dim or adapter.d_pool != base.cfg.d_pool:
            raise DimensionError("adapter does not fit the base model's widths")
        self.base = base
        self.adapter = adapter

    @property
    def cfg(self):
        return self.base.cfg

    @property
    def n_layers(self) -> int:
        return self.base.n_layers

    def global_conditioning(self, pooled, t, temb_offset=None) -> Tensor:
        pooled = np.atleast_2d(np.asarray(pooled, np.float32))
        offset = adapter_contribution(self.adapter, pooled)
        if temb_offset is not None:
            offset = offset + temb_offset
        return self.base.global_conditioning(np.zeros_like(pooled), t, offset)

    def forward(self, *args, **kwargs):
        return self.base.forward(*args, **kwargs)

    __call__ = forward


def distill_step(base: DiT, adapter: PooledAdapter, x0: np.ndarray, t: np.ndarray, noise: np.ndarray,
                 pooled: np.ndarray, tokens: np.ndarray, mask: np.ndarray) -> Tensor:
    """Distillation loss for one batch; call ``backward`` on the result to train the adapter."""
    t = np.asarray(t, np.float64).reshape(-1)
    tb = t.reshape(-1, 1, 1, 1)
    x_t = ((1.0 - tb) * x0 + tb * noise).astype(np.float32)
    zeros = np.zeros_like(pooled)
    with no_grad():
        y_teacher = base.global_conditioning(zeros, t)
        teacher, _ = base.forward(x_t, tokens, mask, [y_teacher] * base.n_layers)
    y_student = base.global_conditioning(zeros, t, adapter_contribution(adapter, pooled))
    student, _ = base.forward(x_t, tokens, np.zeros_like(mask), [y_student] * base.n_layers)
    return T.mse(student, teacher.data)


def check_frozen(base: DiT) -> None:
    for name, p in base.parameters().items():
        if p.requires_grad or p.grad is not None:
            raise FrozennessError(f"base parameter {name!r} received a gradient")


@dataclass
class RetrofitRun:
    base_hash: str
    adapter: PooledAdapter
    iterations: int = 0
    losses: list[float] = field(default_factory=list)

    def moving_average(self, at: int, window: int = 100) -> float:
        """Mean loss over the ``window`` iterations ending at iteration ``at`` (1-based)."""
        lo = max(0, at - window)
        return float(np.mean(self.losses[lo:at]))


def retrofit_train(base: DiT, ds: ToyDataset, iterations: int = 1000, lr: float = 1e-3, batch: int = 16,
                   d_adapter: int = 64, seed: int = 11, base_hash: str = "",
                   adapter: PooledAdapter | None = None) -> RetrofitRun:
    if len(ds) == 0:
        raise ConfigError("retrofit needs a non-empty dataset")
    if iterations < 0:
        raise ConfigError("iterations must be non-negative")
    base.freeze()
    adapter = adapter or PooledAdapter(base.cfg.d_pool, base.cfg.t_dim, d_adapter, seed)
    run = RetrofitRun(base_hash, adapter)
    rng = np.random.default_rng(seed)
    pooled_all, tokens_all, mask_all = encode_batch(ds.prompts)
    params = adapter.parameters()
    state = OptimizerState(lr=lr)
    initial = None
    bad_run = 0
    for it in range(iterations):
        idx = rng.integers(0, len(ds), batch)
        x0 = ds.images[idx]
        t = rng.random(batch)
        noise = rng.standard_normal(x0.shape).astype(np.float32)
        loss = distill_step(base, adapter, x0, t, noise, pooled_all[idx], tokens_all[idx], mask_all[idx])
        adapter.zero_grad()
        loss.backward()
        check_frozen(base)
        clip_grad_norm(params, 1.0)
        adam_step(params, state)
        value = loss.item()
        run.losses.append(value)
        run.iterations += 1
        initial = value if initial is None else initial
        bad_run = bad_run + 1 if value > 10 * initial else 0
        if bad_run >= 100:
            raise DivergenceError(f"distillation loss above 10x initial for 100 iterations (iteration {it})")
        if (it + 1) % 100 == 0:
            log.info("retrofit %d loss %.5f (avg %.5f)", it + 1, value, run.moving_average(it + 1))
    return run


def save_adapter(adapter: PooledAdapter, path: str | Path, base_hash: str, meta: dict | None = None) -> str:
    return checkpoint.save(adapter, path, "adapter", adapter.config(), {"base_hash": base_hash, **(meta or {})})


def load_adapter(path: str | Path, base_hash: str) -> PooledAdapter:
    manifest, arrays = checkpoint.read(path)
    if manifest["kind"] != "adapter":
        raise CheckpointError(f"{path} holds a {manifest['kind']!r}, not an adapter")
    linked = manifest["meta"].get("base_hash")
    if linked != base_hash:
        raise CheckpointError(f"adapter was trained against base {linked}, not {base_hash}")
    cfg = manifest["config"]
    adapter = PooledAdapter(cfg["d_pool"], cfg["t_dim"], cfg["d_adapter"])
    checkpoint.load_into(adapter, arrays)
    return adapter
