"""Diffusion transformer with modulation-layer conditioning.

Sequence layout per sample: 8 text tokens followed by 64 image patches (2x2
pixels, 3 channels). Every block has two modulation sites, before attention
and before the MLP; each computes ``alpha * s + beta`` from the block's
conditioning vector with a zero-initialized linear head, ``alpha = 1 + delta``.
Only image tokens are modulated.

The conditioning vector ``y = MLP(embed_timestep(t), pooled)`` is passed per
layer, so a caller can hand each block a different vector.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, RangeError
from .nn import tensor as T
from .nn.layers import MLP, Linear, Module, MultiheadAttention, Parameter, multihead_attention
from .nn.tensor import Tensor
from .toyworld import D_POOL, D_TOKEN, N_TEXT, RESOLUTION


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 8
    heads: int = 4
    d_pool: int = D_POOL
    d_token: int = D_TOKEN
    n_text: int = N_TEXT
    image_size: int = RESOLUTION
    channels: int = 3
    patch: int = 2
    t_dim: int = 64
    mlp_mult: int = 4
    use_pooled: bool = True
    init_seed: int = 0

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("n_layers must be at least 1")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.image_size % self.patch:
            raise ConfigError("image_size must be a multiple of patch")
        if self.t_dim % 2:
            raise ConfigError("t_dim must be even")

    @property
    def n_img(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModulationParams:
    alpha: Tensor  # [B, d]
    beta: Tensor


def modulate(s: Tensor, params: ModulationParams) -> Tensor:
    """``alpha * s + beta`` broadcast over the sequence axis of ``s`` [B, n, d]."""
    if s.shape[-1] != params.alpha.shape[-1]:
        raise DimensionError(f"modulation width {params.alpha.shape} does not match {s.shape}")
    if s.ndim == 2:
        return s * params.alpha + params.beta
    return T.scale_shift(s, params.alpha, params.beta)


def sinusoidal(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = 1000.0 * np.asarray(t, np.float64)[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def _pos_embed_2d(grid: int, dim: int) -> np.ndarray:
    r, c = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    q = dim // 2
    # periods from 1 to 2 * grid cells, so neighbouring patches are well separated
    period = 2.0 * grid
    emb = np.concatenate([sinusoidal(r.reshape(-1) / 1000.0, q, period),
                          sinusoidal(c.reshape(-1) / 1000.0, q, period)], axis=1)
    return emb.astype(np.float32)


class ModHead(Module):
    """Linear map y -> (delta, beta); zero-initialized so alpha = 1, beta = 0."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.lin = Linear(d, 2 * d, rng, zero=True)

    def __call__(self, y: Tensor) -> ModulationParams:
        d = y.shape[-1]
        m = self.lin(y)
        return ModulationParams(alpha=m[:, :d] + 1.0, beta=m[:, d:])


class Block(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.mod_attn = ModHead(cfg.d_model, rng)
        self.attn = MultiheadAttention(cfg.d_model, cfg.heads, rng)
        self.mod_mlp = ModHead(cfg.d_model, rng)
        self.mlp = MLP(cfg.d_model, cfg.mlp_mult, rng)

    def __call__(self, seq: Tensor, y: Tensor, n_text: int, record: bool = False,
                 capture: list | None = None):
        """One transformer block; returns ``(seq', attention weights or None)``.

        ``capture`` receives the pre-modulation activations of both sites.
        """
        h = T.layer_norm(seq)
        if capture is not None:
            capture.append(h.data)
        h = self._modulated(h, self.mod_attn(y), n_text)
        a, weights = multihead_attention(h, h, self.attn, record)
        seq = seq + a
        h = T.layer_norm(seq)
        if capture is not None:
            capture.append(h.data)
        h = self._modulated(h, self.mod_mlp(y), n_text)
        return seq + self.mlp(h), weights

    @staticmethod
    def _modulated(h: Tensor, params: ModulationParams, n_text: int) -> Tensor:
        return T.scale_shift(h, params.alpha, params.beta, start=n_text)


def block_forward(block: Block, seq: Tensor, y: Tensor, n_text: int = N_TEXT, record: bool = False):
    return block(seq, y, n_text, record)


class DiT(Module):
    def __init__(self, cfg: ModelConfig | None = None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        d = cfg.d_model
        self.t_embed = Linear(cfg.t_dim, cfg.t_dim, rng)
        self.cond_in = Linear(cfg.t_dim + cfg.d_pool, d, rng)
        self.cond_out = Linear(d, d, rng)
        self.text_proj = Linear(cfg.d_token, d, rng)
        self.null_seq = Parameter(rng.normal(0.0, 1.0, size=(cfg.n_text, cfg.d_token)).astype(np.float32))
        self.patch_embed = Linear(cfg.patch_dim, d, rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.final_mod = ModHead(d, rng)
        self.final = Linear(d, cfg.patch_dim, rng)
        self._pos = _pos_embed_2d(cfg.image_size // cfg.patch, d)
        self.trained_steps = 0

    @property
    def n_layers(self) -> int:
        return self.cfg.n_layers

    # -- conditioning -----------------------------------------------------------
    def embed_timestep(self, t) -> Tensor:
        t = np.atleast_1d(np.asarray(t, np.float64))
        if not np.isfinite(t).all() or (t < 0).any() or (t > 1).any():
            raise RangeError(f"timestep outside [0, 1]: {t}")
        return self.t_embed(Tensor(sinusoidal(t, self.cfg.t_dim)))

    def global_conditioning(self, pooled, t, temb_offset: Tensor | None = None) -> Tensor:
        """y = two-layer SiLU network over [timestep embedding, pooled], shape [B, d_model]."""
        pooled = np.atleast_2d(np.asarray(pooled.data if isinstance(pooled, Tensor) else pooled))
        if pooled.shape[-1] != self.cfg.d_pool:
            raise DimensionError(f"pooled embedding has width {pooled.shape[-1]}, expected {self.cfg.d_pool}")
        if not self.cfg.use_pooled:
            pooled = np.zeros_like(pooled)
        temb = self.embed_timestep(np.broadcast_to(np.atleast_1d(t), (pooled.shape[0],)))
        if temb_offset is not None:
            temb = temb + temb_offset
        h = T.concat([temb, Tensor(pooled)], axis=1)
        return self.cond_out(T.silu(self.cond_in(h)))

    def text_tokens(self, tokens: np.ndarray, mask: np.ndarray) -> Tensor:
        """Project clause tokens, substituting the learned null sequence at masked positions."""
        mixed = T.where_rows(np.asarray(mask, bool)[..., None], Tensor(tokens), self.null_seq)
        return self.text_proj(mixed)

    # -- image tokens -------------------------------------------------------------
    def patchify(self, x: np.ndarray) -> np.ndarray:
        c, p = self.cfg.channels, self.cfg.patch
        g = self.cfg.image_size // p
        b = x.shape[0]
        return x.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 3, 5, 1).reshape(b, g * g, p * p * c)

    def unpatchify(self, h: Tensor) -> Tensor:
        c, p = self.cfg.channels, self.cfg.patch
        g = self.cfg.image_size // p
        b = h.shape[0]
        return h.reshape(b, g, g, p, p, c).transpose(0, 5, 1, 3, 2, 4).reshape(b, c, g * p, g * p)

    # -- forward ------------------------------------------------------------------------
    def forward(self, x_t: np.ndarray, tokens: np.ndarray, mask: np.ndarray, ys: Sequence[Tensor],
                record: bool = False, capture: list | None = None):
        """Velocity prediction for latents ``x_t`` [B, 3, 16, 16].

        ``ys`` holds one conditioning tensor [B, d_model] per block. Returns
        ``(v, attention)`` where ``attention`` is a per-layer list of
        [B, heads, n, n] arrays when ``record`` is set.
        """
        if len(ys) != self.cfg.n_layers:
            raise ConfigError(f"expected {self.cfg.n_layers} conditioning vectors, got {len(ys)}")
        x_t = np.asarray(x_t, T.default_dtype())
        img = self.patch_embed(Tensor(self.patchify(x_t))) + self._pos
        seq = T.concat([self.text_tokens(tokens, mask), img], axis=1)
        weights = [] if record else None
        n_text = self.cfg.n_text
        for block, y in zip(self.blocks, ys):
            layer_capture = [] if capture is not None else None
            seq, w = block(seq, y, n_text, record, layer_capture)
            if record:
                weights.append(w)
            if capture is not None:
                capture.append(layer_capture)
        head = self.final_mod(ys[-1])
        out = self.final(T.scale_shift(T.layer_norm(seq[:, n_text:]), head.alpha, head.beta))
        return self.unpatchify(out), weights

    __call__ = forward


def model_forward(model: DiT, x_t, tokens, mask, ys, record: bool = False):
    return model.forward(x_t, tokens, mask, ys, record)


def flow_matching_loss(model: DiT, x0: np.ndarray, t: np.ndarray, noise: np.ndarray,
                       pooled: np.ndarray, tokens: np.ndarray, mask: np.ndarray,
                       temb_offset: Tensor | None = None) -> Tensor:
    """Rectified-flow objective: x_t = (1-t) x0 + t eps, target eps - x0."""
    t = np.asarray(t, np.float64).reshape(-1)
    tb = t.reshape(-1, 1, 1, 1)
    x_t = ((1.0 - tb) * x0 + tb * noise).astype(T.default_dtype())
    target = (noise - x0).astype(T.default_dtype())
    y = model.global_conditioning(pooled, t, temb_offset)
    pred, _ = model.forward(x_t, tokens, mask, [y] * model.n_layers)
    return T.mse(pred, target)
