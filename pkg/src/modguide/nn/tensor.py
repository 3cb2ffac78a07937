"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` records the operation that produced it and a closure that
maps the output gradient to gradients of its parents. ``backward`` walks the
graph in reverse topological order. Only what the diffusion transformer needs
is implemented; broadcasting follows numpy rules and gradients are summed back
to the operand shape.

Arithmetic runs in float32. ``shadow64()`` switches every newly created tensor
to float64, which exists for finite-difference checks only.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import DimensionError, NumericError

_state = {"dtype": np.float32, "grad": True, "check_finite": True}


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def shadow64():
    """Create all tensors in float64 inside the block."""
    prev = _state["dtype"]
    _state["dtype"] = np.float64
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


def _check(data: np.ndarray, op: str) -> None:
    # a NaN or Inf anywhere makes the sum non-finite
    if _state["check_finite"] and not np.isfinite(data.sum()):
        raise NumericError(f"non-finite value produced by {op}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dtype = dtype or _state["dtype"]
        arr = np.asarray(data)
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        _check(arr, "constructor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    # -- structure ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph -------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    needs = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a, _dtype_of(b))
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, _dtype_of(b))
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        k = b
        return _result(a.data * k, (a,), lambda g: (g * k,), "scale")
    a = as_tensor(a, b.dtype)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def back(g):
        ga = unbroadcast(g * bd, sa) if a.requires_grad else None
        gb = unbroadcast(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), back, "mul")


def _dtype_of(x):
    return x.dtype if isinstance(x, Tensor) else None


def square(x: Tensor) -> Tensor:
    d = x.data
    return _result(d * d, (x,), lambda g: (2.0 * d * g,), "square")


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    s = np.tanh(0.5 * x)
    s += 1.0
    s *= 0.5
    return s


def silu(x: Tensor) -> Tensor:
    d = x.data
    s = sigmoid_np(d)
    out = d * s

    def back(g):
        return (g * (s * (1.0 + d * (1.0 - s))),)

    return _result(out, (x,), back, "silu")


# -- reductions and shape ----------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None:
            g = g.reshape((1,) * len(shape))
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out, dtype=x.dtype).reshape(np.shape(out) or (1,)), (x,), back, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g) if _fancy(idx) else full.__setitem__(idx, g)
        return (full,)

    return _result(x.data[idx], (x,), back, "getitem")


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(xs: Iterable[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in xs], axis=axis), xs, back, "concat")


def where_rows(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b``; mask broadcasts against both."""
    sa, sb = a.shape, b.shape
    out = np.where(mask, a.data, b.data)

    def back(g):
        return (unbroadcast(np.where(mask, g, 0.0), sa), unbroadcast(np.where(mask, 0.0, g), sb))

    return _result(out, (a, b), back, "where")


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def back(g):
        ga = gb = None
        if b.ndim == 2:
            if a.requires_grad:
                ga = g @ bd.T
            if b.requires_grad:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            if a.requires_grad:
                ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
            if b.requires_grad:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, (a, b), back, "matmul")


# -- fused layers --------------------------------------------------------------

def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    p = softmax_np(x.data, axis)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (x,), back, "softmax")


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, no affine."""
    if x.shape[-1] < 1:
        raise DimensionError("layer_norm needs a non-empty last axis")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (rstd * (g - gm - xhat * gx),)

    return _result(xhat, (x,), back, "layer_norm")


def attention_core(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, np.ndarray]:
    """softmax(q kᵀ / sqrt(dh)) v over the last two axes.

    Returns the output and the attention weights as a plain array (for
    recording; they carry no gradient of their own).
    """
    qd, kd, vd = q.data, k.data, v.data
    scale = 1.0 / math.sqrt(qd.shape[-1])
    p = softmax_np((qd @ np.swapaxes(kd, -1, -2)) * scale)
    out = p @ vd

    def back(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gs *= scale
        gq = gs @ kd
        gk = np.swapaxes(gs, -1, -2) @ qd
        return gq, gk, gv

    return _result(out, (q, k, v), back, "attention"), p


def scale_shift(x: Tensor, scale: Tensor, shift: Tensor, start: int = 0) -> Tensor:
    """``scale * x + shift`` on rows ``start:`` of ``x`` [B, n, d]; earlier rows pass through.

    ``scale`` and ``shift`` are [B, d], broadcast over the row axis.
    """
    xd, a, b = x.data, scale.data[:, None, :], shift.data[:, None, :]
    out = xd.copy()
    out[:, start:] *= a
    out[:, start:] += b

    def back(g):
        gt = g[:, start:]
        gx = None
        if x.requires_grad:
            gx = g.copy()
            gx[:, start:] *= a
        ga = (gt * xd[:, start:]).sum(axis=1) if scale.requires_grad else None
        gb = gt.sum(axis=1) if shift.requires_grad else None
        return gx, ga, gb

    return _result(out, (x, scale, shift), back, "scale_shift")


def mse(pred: Tensor, target) -> Tensor:
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    diff = pred.data - t
    n = diff.size
    out = np.asarray([(diff * diff).sum() / n], dtype=pred.dtype)
    parents = (pred, target) if isinstance(target, Tensor) else (pred,)

    def back(g):
        gd = (2.0 / n) * g.reshape(()) * diff
        return (gd, -gd) if len(parents) == 2 else (gd,)

    return _result(out, parents, back, "mse")
