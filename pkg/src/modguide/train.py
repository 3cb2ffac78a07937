"""Flow-matching training loop for the toy DiT."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from .dit import DiT, flow_matching_loss
from .errors import ConfigError, DivergenceError
from .nn import OptimizerState, adam_step, clip_grad_norm, no_grad
from .toyworld import ToyDataset, encode_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch: int = 16
    lr: float = 3e-3
    warmup: int = 200
    min_lr_frac: float = 0.1
    grad_clip: float = 1.0
    # independent per-sample dropouts; both dropped = the unconditional prompt
    text_dropout: float = 0.2
    pooled_dropout: float = 0.5
    seed: int = 7
    eval_size: int = 256
    t_dist: str = "uniform"  # or "logit_normal"

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.lr <= 0:
            raise ConfigError("steps >= 0, batch >= 1 and lr > 0 are required")
        for name in ("text_dropout", "pooled_dropout"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.t_dist not in ("uniform", "logit_normal"):
            raise ConfigError(f"unknown t_dist {self.t_dist!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(cfg: TrainConfig, step: int) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.lr * (cfg.min_lr_frac + (1 - cfg.min_lr_frac) * 0.5 * (1 + math.cos(math.pi * frac)))


@dataclass
class EvalBatch:
    """A frozen (x0, t, noise, conditioning) draw so losses are comparable across steps."""

    x0: np.ndarray
    t: np.ndarray
    noise: np.ndarray
    pooled: np.ndarray
    tokens: np.ndarray
    mask: np.ndarray

    @classmethod
    def draw(cls, ds: ToyDataset, size: int, seed: int) -> "EvalBatch":
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(ds), size=min(size, len(ds)), replace=False)
        pooled, tokens, mask = encode_batch([ds.prompts[i] for i in idx])
        x0 = ds.images[idx]
        return cls(x0, rng.random(len(idx)), rng.standard_normal(x0.shape).astype(np.float32),
                   pooled, tokens, mask)

    def loss(self, model: DiT, chunk: int = 64) -> float:
        total = 0.0
        with no_grad():
            for s in range(0, len(self.x0), chunk):
                sl = slice(s, s + chunk)
                part = flow_matching_loss(model, self.x0[sl], self.t[sl], self.noise[sl],
                                          self.pooled[sl], self.tokens[sl], self.mask[sl])
                total += part.item() * len(self.x0[sl])
        return total / len(self.x0)


def apply_dropout(rng: np.random.Generator, pooled: np.ndarray, mask: np.ndarray,
                  text_p: float, pooled_p: float) -> tuple[np.ndarray, np.ndarray]:
    b = len(pooled)
    drop_text = rng.random(b) < text_p
    drop_pool = rng.random(b) < pooled_p
    pooled = np.where(drop_pool[:, None], 0.0, pooled).astype(np.float32)
    mask = mask & ~drop_text[:, None]
    return pooled, mask


def train(model: DiT, ds: ToyDataset, cfg: TrainConfig,
          on_step: Callable[[int, float], None] | None = None) -> dict:
    """Train ``model`` in place. Returns batch losses and the frozen eval-batch losses."""
    rng = np.random.default_rng(cfg.seed)
    pooled_all, tokens_all, mask_all = encode_batch(ds.prompts)
    evalb = EvalBatch.draw(ds, cfg.eval_size, cfg.seed + 1)
    state = OptimizerState(lr=cfg.lr)
    params = model.parameters()
    history = {"loss": [], "eval_loss": [(0, evalb.loss(model))]}
    initial = None
    bad_run = 0
    for step in range(cfg.steps):
        idx = rng.integers(0, len(ds), cfg.batch)
        x0 = ds.images[idx]
        t = rng.random(cfg.batch) if cfg.t_dist == "uniform" else 1.0 / (1.0 + np.exp(-rng.standard_normal(cfg.batch)))
        noise = rng.standard_normal(x0.shape).astype(np.float32)
        pooled, mask = apply_dropout(rng, pooled_all[idx], mask_all[idx], cfg.text_dropout, cfg.pooled_dropout)
        loss = flow_matching_loss(model, x0, t, noise, pooled, tokens_all[idx], mask)
        model.zero_grad()
        loss.backward()
        clip_grad_norm(params, cfg.grad_clip)
        adam_step(params, state, lr=lr_at(cfg, step))
        value = loss.item()
        history["loss"].append(value)
        initial = value if initial is None else initial
        bad_run = bad_run + 1 if value > 10 * initial else 0
        if bad_run >= 100:
            raise DivergenceError(f"loss above 10x its initial value for 100 steps (step {step})")
        model.trained_steps += 1
        if on_step is not None:
            on_step(step, value)
        if (step + 1) % 500 == 0 or step + 1 == cfg.steps:
            history["eval_loss"].append((step + 1, evalb.loss(model)))
            log.info("step %d loss %.4f eval %.4f", step + 1, value, history["eval_loss"][-1][1])
    return history
