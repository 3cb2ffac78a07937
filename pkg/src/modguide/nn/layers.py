"""Parameter containers and the layer primitives of the transformer."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..errors import ConfigError, DimensionError
from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)


class Module:
    """Tree of parameters with stable dotted names.

    Names follow attribute insertion order, lists contribute their index:
    ``blocks.3.mod_attn.weight``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> dict[str, Parameter]:
        params = dict(self.named_parameters())
        return params

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def freeze(self) -> None:
        for p in self.parameters().values():
            p.requires_grad = False
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (used for the float64 gradient checks)."""
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def normal_init(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(np.float32)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False, bias: bool = True):
        # fan-in scaling keeps attention logits large enough to learn locality early
        w = np.zeros((d_in, d_out), np.float32) if zero else normal_init(rng, (d_in, d_out), d_in ** -0.5)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        return out if self.bias is None else out + self.bias


def silu(x: Tensor) -> Tensor:
    return T.silu(x)


layer_norm = T.layer_norm


class MLP(Module):
    """linear -> SiLU -> linear."""

    def __init__(self, d: int, mult: int, rng: np.random.Generator):
        self.fc1 = Linear(d, d * mult, rng)
        self.fc2 = Linear(d * mult, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(x)))


def mlp_block(x: Tensor, mlp: MLP) -> Tensor:
    return mlp(x)


class MultiheadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if heads < 1 or d % heads:
            raise ConfigError(f"d_model={d} is not divisible by heads={heads}")
        self.heads = heads
        self.q = Linear(d, d, rng)
        # a key bias only adds a per-query constant to the logits, which softmax ignores
        self.k = Linear(d, d, rng, bias=False)
        self.v = Linear(d, d, rng)
        self.proj = Linear(d, d, rng)

    def __call__(self, q_src: Tensor, kv_src: Tensor | None = None, record: bool = False):
        return multihead_attention(q_src, q_src if kv_src is None else kv_src, self, record)


def multihead_attention(q_src: Tensor, kv_src: Tensor, attn: MultiheadAttention, record: bool = False):
    """Scaled dot-product attention over the second-to-last axis.

    Inputs are ``[..., n, d]``. Returns ``(out, weights)`` where ``weights``
    is ``[..., heads, n_q, n_kv]`` when ``record`` is set, else ``None``.
    """
    *lead, n_q, d = q_src.shape
    n_kv = kv_src.shape[-2]
    if kv_src.shape[-1] != d:
        raise DimensionError(f"attention width mismatch: {q_src.shape} vs {kv_src.shape}")
    h = attn.heads
    dh = d // h
    nb = len(lead)
    perm = tuple(range(nb)) + (nb + 1, nb, nb + 2)

    q = attn.q(q_src).reshape(*lead, n_q, h, dh).transpose(perm)
    k = attn.k(kv_src).reshape(*lead, n_kv, h, dh).transpose(perm)
    v = attn.v(kv_src).reshape(*lead, n_kv, h, dh).transpose(perm)
    o, p = T.attention_core(q, k, v)
    o = o.transpose(perm).reshape(*lead, n_q, d)
    return attn.proj(o), (p if record else None)
