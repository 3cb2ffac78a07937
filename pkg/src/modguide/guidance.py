"""Guidance in the modulation space with per-layer scale schedules.

The conditioning vector of the base prompt is shifted along the difference
between the conditioning vectors of a positive and a negative prompt,

    y_hat_l = y(p, t) + w_l * (y(p_plus, t) - y(p_minus, t)),

with a separate scale ``w_l`` for every transformer block. Schedules are
written against a 57-block reference stack; in ``fractional`` mode their
layer indices are rescaled to the model depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .toyworld import ToyPrompt, pooled_encode

REFERENCE_DEPTH = 57
SCHEDULE_KINDS = ("constant", "step", "window", "bumps", "two_level")
_PARAM_NAMES = {
    "constant": ("w",),
    "step": ("i", "w"),
    "window": ("i1", "i2", "w"),
    "bumps": ("i1", "i2", "sigma", "w"),
    "two_level": ("i1", "i2", "i3", "w1", "w2"),
}
_INDEX_PARAMS = {"i", "i1", "i2", "i3"}


@dataclass(frozen=True)
class GuidanceSchedule:
    kind: str
    params: tuple[float, ...]
    n_layers: int
    index_mode: str = "fractional"

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.index_mode not in ("absolute", "fractional"):
            raise ConfigError(f"unknown index mode {self.index_mode!r}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be at least 1")
        names = _PARAM_NAMES[self.kind]
        if len(self.params) != len(names):
            raise ConfigError(f"{self.kind} takes parameters {names}, got {len(self.params)} values")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if not all(math.isfinite(p) for p in self.params):
            raise ConfigError("schedule parameters must be finite")
        idx = [v for n, v in zip(names, self.params) if n in _INDEX_PARAMS]
        if any(a > b for a, b in zip(idx, idx[1:])) or (idx and (idx[0] < 0 or idx[-1] > self.reference_depth)):
            raise ConfigError(f"schedule indices must satisfy 0 <= i1 <= i2 <= i3 <= {self.reference_depth}")
        if self.kind == "bumps" and self.named["sigma"] <= 0:
            raise ConfigError("bumps width sigma must be positive")

    # constructors mirroring the parameter lists
    @classmethod
    def constant(cls, w, n_layers, index_mode="fractional"):
        return cls("constant", (w,), n_layers, index_mode)

    @classmethod
    def step(cls, i, w, n_layers, index_mode="fractional"):
        return cls("step", (i, w), n_layers, index_mode)

    @classmethod
    def window(cls, i1, i2, w, n_layers, index_mode="fractional"):
        return cls("window", (i1, i2, w), n_layers, index_mode)

    @classmethod
    def bumps(cls, i1, i2, w, n_layers, sigma=5.0, index_mode="fractional"):
        return cls("bumps", (i1, i2, sigma, w), n_layers, index_mode)

    @classmethod
    def two_level(cls, i1, i2, i3, w1, w2, n_layers, index_mode="fractional"):
        return cls("two_level", (i1, i2, i3, w1, w2), n_layers, index_mode)

    @property
    def named(self) -> dict[str, float]:
        return dict(zip(_PARAM_NAMES[self.kind], self.params))

    @property
    def reference_depth(self) -> int:
        return REFERENCE_DEPTH if self.index_mode == "fractional" else self.n_layers

    def _index(self, i: float) -> float:
        if self.index_mode == "absolute":
            return i
        return math.floor(i * self.n_layers / REFERENCE_DEPTH + 0.5)

    def __call__(self, layer: int) -> float:
        return schedule_eval(self, layer)

    def values(self) -> list[float]:
        return [schedule_eval(self, l) for l in range(self.n_layers)]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params), "index_mode": self.index_mode}

    @classmethod
    def from_dict(cls, d: dict, n_layers: int) -> "GuidanceSchedule":
        unknown = set(d) - {"kind", "params", "index_mode"}
        if unknown:
            raise ConfigError(f"unknown schedule keys: {sorted(unknown)}")
        try:
            return cls(d["kind"], tuple(d["params"]), n_layers, d.get("index_mode", "fractional"))
        except KeyError as e:
            raise ConfigError(f"schedule is missing {e.args[0]!r}") from None


def schedule_eval(sched: GuidanceSchedule, layer: int) -> float:
    """Scale for block ``layer``. Intervals are half-open, [start, stop)."""
    if not 0 <= layer < sched.n_layers:
        raise ConfigError(f"layer {layer} outside [0, {sched.n_layers})")
    p = sched.named
    ix = sched._index
    if sched.kind == "constant":
        return p["w"]
    if sched.kind == "step":
        return 0.0 if layer < ix(p["i"]) else p["w"]
    if sched.kind == "window":
        return p["w"] if ix(p["i1"]) <= layer < ix(p["i2"]) else 0.0
    if sched.kind == "bumps":
        sigma = p["sigma"] if sched.index_mode == "absolute" else p["sigma"] * sched.n_layers / REFERENCE_DEPTH
        centers = (p["i1"], p["i2"]) if sched.index_mode == "absolute" else (
            p["i1"] * sched.n_layers / REFERENCE_DEPTH, p["i2"] * sched.n_layers / REFERENCE_DEPTH)
        return p["w"] * max(math.exp(-((layer - c) ** 2) / (2 * sigma ** 2)) for c in centers)
    # two_level
    if ix(p["i1"]) <= layer < ix(p["i2"]):
        return p["w1"]
    if ix(p["i2"]) <= layer < ix(p["i3"]):
        return p["w2"]
    return 0.0


@dataclass(frozen=True)
class GuidanceSpec:
    base: ToyPrompt
    positive: ToyPrompt
    negative: ToyPrompt
    schedule: GuidanceSchedule

    def to_dict(self) -> dict:
        return {"base": self.base.canonical, "positive": self.positive.canonical,
                "negative": self.negative.canonical, **self.schedule.to_dict()}

    @classmethod
    def from_dict(cls, d: dict, n_layers: int) -> "GuidanceSpec":
        sched = {k: v for k, v in d.items() if k in ("kind", "params", "index_mode")}
        unknown = set(d) - {"base", "positive", "negative", "kind", "params", "index_mode"}
        if unknown:
            raise ConfigError(f"unknown guidance keys: {sorted(unknown)}")
        return cls(ToyPrompt.parse(d.get("base", "")), ToyPrompt.parse(d.get("positive", "")),
                   ToyPrompt.parse(d.get("negative", "")), GuidanceSchedule.from_dict(sched, n_layers))


# -- the guidance arithmetic ------------------------------------------------------

def guidance_direction(model, positive: Sequence[ToyPrompt], negative: Sequence[ToyPrompt], t) -> np.ndarray:
    """Delta = y(p_plus, t) - y(p_minus, t), one row per prompt pair."""
    pos = np.stack([pooled_encode(p) for p in positive])
    neg = np.stack([pooled_encode(p) for p in negative])
    y_pos = model.global_conditioning(pos, t).data
    y_neg = model.global_conditioning(neg, t).data
    return y_pos - y_neg


def guided_conditioning(y: np.ndarray, delta: np.ndarray, w) -> np.ndarray:
    """y + w * delta; entries whose shift is exactly zero keep y's bits."""
    y = np.asarray(y)
    delta = np.asarray(delta)
    if y.shape != delta.shape:
        raise DimensionError(f"conditioning {y.shape} and direction {delta.shape} differ")
    shift = np.asarray(w, dtype=y.dtype) * delta
    return np.where(shift == 0, y, y + shift)


def cfg_combine(v_cond: np.ndarray, v_uncond: np.ndarray, scale: float) -> np.ndarray:
    """v_u + s (v_c - v_u); s = 1 and s = 0 return the corresponding branch exactly."""
    if np.shape(v_cond) != np.shape(v_uncond):
        raise DimensionError(f"velocity shapes differ: {np.shape(v_cond)} vs {np.shape(v_uncond)}")
    if scale < 0:
        raise ConfigError("cfg scale must be non-negative")
    if scale == 1:
        return v_cond
    if scale == 0:
        return v_uncond
    return v_uncond + scale * (v_cond - v_uncond)


def schedule_matrix(specs: Sequence[GuidanceSpec], n_layers: int) -> np.ndarray:
    """Per-layer, per-sample scales, shape [L, B]."""
    return np.array([[schedule_eval(s.schedule, l) for s in specs] for l in range(n_layers)], np.float64)


def build_guided_y(model, specs: Sequence[GuidanceSpec], t, y: np.ndarray | None = None) -> list[np.ndarray]:
    """Per-layer conditioning vectors [B, d] for a batch of guidance specs at time ``t``."""
    n_layers = model.n_layers
    if y is None:
        pooled = np.stack([pooled_encode(s.base) for s in specs])
        y = model.global_conditioning(pooled, t).data
    scales = schedule_matrix(specs, n_layers)
    if not scales.any():
        return [y] * n_layers
    delta = guidance_direction(model, [s.positive for s in specs], [s.negative for s in specs], t)
    return [guided_conditioning(y, delta, scales[l][:, None]) for l in range(n_layers)]


# -- task presets: positive and negative prompts per task -------------------------

PLAIN = ToyPrompt.of(detail="plain")
TEXTURED = ToyPrompt.of(detail="textured")
_OPPOSITE_LAYOUT = {"top": "bottom", "bottom": "top", "left": "right", "right": "left"}


def strategy(number: int, n_layers: int, index_mode: str = "fractional", w: float = 3.0) -> GuidanceSchedule:
    """Four named schedules, indexed against the 57-layer reference depth."""
    if number == 1:
        return GuidanceSchedule.step(5, w, n_layers, index_mode)
    if number == 2:
        return GuidanceSchedule.window(13, 30, w, n_layers, index_mode)
    if number == 3:
        return GuidanceSchedule.bumps(20, 50, w, n_layers, index_mode=index_mode)
    if number == 4:
        return GuidanceSchedule.two_level(13, 30, 45, 3.0, 1.0, n_layers, index_mode)
    raise ConfigError(f"no strategy {number}")


def aesthetics_spec(base: ToyPrompt, schedule: GuidanceSchedule) -> GuidanceSpec:
    return GuidanceSpec(base, TEXTURED, PLAIN, schedule)


def complexity_spec(base: ToyPrompt, schedule: GuidanceSchedule) -> GuidanceSpec:
    return GuidanceSpec(base, TEXTURED, PLAIN, schedule)


def counting_spec(base: ToyPrompt, schedule: GuidanceSchedule) -> GuidanceSpec:
    """Positive direction: the requested count (and shape, when stated); negative: plain detail."""
    count = base.get("count")
    if count is None:
        raise ConfigError(f"counting guidance needs a count clause: {base}")
    positive = ToyPrompt.of(count=count, shape=base.get("shape"))
    return GuidanceSpec(base, positive, PLAIN, schedule)


def position_spec(base: ToyPrompt, schedule: GuidanceSchedule) -> GuidanceSpec:
    layout = base.get("layout")
    if layout is None:
        raise ConfigError(f"position guidance needs a layout clause: {base}")
    return GuidanceSpec(base, ToyPrompt.of(layout=layout), ToyPrompt.of(layout=_OPPOSITE_LAYOUT[layout]), schedule)


TASKS = {
    "aesthetics": (aesthetics_spec, lambda L, mode: GuidanceSchedule.step(5, 3.0, L, mode)),
    "complexity": (complexity_spec, lambda L, mode: GuidanceSchedule.step(10, 3.0, L, mode)),
    "counting": (counting_spec, lambda L, mode: GuidanceSchedule.step(5, 3.0, L, mode)),
    "position": (position_spec, lambda L, mode: GuidanceSchedule.two_level(13, 30, 45, 3.0, 1.0, L, mode)),
}


def task_spec(task: str, base: ToyPrompt, n_layers: int, schedule: GuidanceSchedule | None = None,
              index_mode: str = "fractional") -> GuidanceSpec:
    if task not in TASKS:
        raise ConfigError(f"unknown guidance task {task!r}; choose from {sorted(TASKS)}")
    make, default = TASKS[task]
    return make(base, schedule or default(n_layers, index_mode))
