"""Euler sampler with classifier-free and modulation guidance."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .guidance import GuidanceSpec, build_guided_y, cfg_combine
from .nn import no_grad
from .nn.tensor import Tensor
from .toyworld import ToyPrompt, encode_batch

# (step index, t, per-layer attention [B, heads, n, n]) for the conditional branch
AttentionHook = Callable[[int, float, list], None]


def initial_noise(seeds: Sequence[int], shape=(3, 16, 16)) -> np.ndarray:
    return np.stack([np.random.default_rng(int(s)).standard_normal(shape).astype(np.float32) for s in seeds])


def sample(model, prompts: Sequence[ToyPrompt], seeds: Sequence[int], guidance: Sequence[GuidanceSpec] | None = None,
           steps: int = 20, cfg: float = 1.0, zero_pooled: bool = False, drop_text: bool = False,
           on_attention: AttentionHook | None = None) -> np.ndarray:
    """Generate one image per prompt, [B, 3, 16, 16] clamped to [-1, 1].

    ``x`` starts from per-sample seeded noise at t = 1 and takes ``steps``
    uniform Euler steps to t = 0. Modulation guidance changes the conditional
    branch only; the unconditional branch (null tokens, zero pooled) is run
    when ``cfg != 1``. ``zero_pooled`` drops the pooled embedding from the
    conditional branch and ``drop_text`` replaces its clause tokens with the
    null sequence.
    """
    if steps < 1:
        raise ConfigError("sampler needs at least one step")
    if len(prompts) != len(seeds):
        raise ConfigError("one seed per prompt is required")
    if guidance is not None:
        if len(guidance) != len(prompts):
            raise ConfigError("one guidance spec per prompt is required")
        if any(g.base != p for g, p in zip(guidance, prompts)):
            raise ConfigError("guidance base prompts must equal the sampled prompts")
    b = len(prompts)
    pooled, tokens, mask = encode_batch(prompts)
    if zero_pooled:
        pooled = np.zeros_like(pooled)
    if drop_text:
        mask = np.zeros_like(mask)
    uncond = cfg != 1.0
    if uncond:
        u_pooled = np.zeros_like(pooled)
        u_mask = np.zeros_like(mask)
    x = initial_noise(seeds)
    n_layers = model.n_layers
    dt = 1.0 / steps
    with no_grad():
        for k in range(steps):
            t = 1.0 - k * dt
            y = model.global_conditioning(pooled, t).data
            if guidance is not None:
                ys = build_guided_y(model, guidance, t, y)
            else:
                ys = [y] * n_layers
            record = on_attention is not None
            if uncond:
                y_u = model.global_conditioning(u_pooled, t).data
                v, att = model.forward(np.concatenate([x, x]), np.concatenate([tokens, tokens]),
                                       np.concatenate([mask, u_mask]),
                                       [Tensor(np.concatenate([yl, y_u])) for yl in ys], record)
                v_c, v_u = v.data[:b], v.data[b:]
                v = cfg_combine(v_c, v_u, cfg)
                if record:
                    att = [a[:b] for a in att]
            else:
                v, att = model.forward(x, tokens, mask, [Tensor(yl) for yl in ys], record)
                v = v.data
            if record:
                on_attention(k, t, att)
            x = x - np.float32(dt) * v
    return np.clip(x, -1.0, 1.0)
