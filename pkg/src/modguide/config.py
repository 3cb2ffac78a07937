"""Run configuration: strict JSON sections plus an append-only metrics log."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .dit import ModelConfig
from .errors import ConfigError
from .train import TrainConfig


def _strict(cls, section: str, d):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    for key in d:
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"section {section!r}: {e}") from None


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    size: int = 10000


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 20
    cfg: float = 1.0
    seed: int = 1000  # sample k uses noise seed ``seed + k``
    count: int = 16
    prompts: list | None = None  # canonical prompt strings; random held-out prompts when absent
    prompt_seed: int = 99

    def __post_init__(self):
        if self.steps < 1 or self.count < 1:
            raise ConfigError("sample.steps and sample.count must be positive")
        if self.cfg < 0:
            raise ConfigError("sample.cfg must be non-negative")


@dataclass(frozen=True)
class GuidanceConfig:
    task: str | None = None  # aesthetics | complexity | counting | position
    schedule: dict | None = None  # GuidanceSchedule.to_dict() form; task default when absent
    positive: str | None = None
    negative: str | None = None
    index_mode: str = "fractional"


@dataclass(frozen=True)
class RetrofitConfig:
    iterations: int = 1000
    lr: float = 1e-3
    d_adapter: int = 64
    batch: int = 16
    seed: int = 11


@dataclass(frozen=True)
class AnalysisConfig:
    prompts: int = 200
    prompt_seed: int = 5
    seeds: list = field(default_factory=lambda: [0])
    task: str = "counting"
    features: list = field(default_factory=lambda: ["count", "color"])
    layers: list | None = None  # restrict attention averages to these layers
    steps: list | None = None  # ... and these sampler steps


@dataclass(frozen=True)
class SweepConfig:
    axis: str = "w"  # w | i | cfg
    grid: list = field(default_factory=lambda: [0, 1, 2, 3, 4, 6, 8])
    task: str = "aesthetics"
    i: float = 5  # step threshold for the dynamic family on the w axis
    w: float = 3.0  # scale on the i axis

    def __post_init__(self):
        if self.axis not in ("w", "i", "cfg"):
            raise ConfigError(f"sweep.axis must be w, i or cfg, not {self.axis!r}")
        if not self.grid:
            raise ConfigError("sweep.grid is empty")


@dataclass(frozen=True)
class IOConfig:
    out: str = "runs/out"
    checkpoint: str | None = None
    checkpoint_hash: str | None = None
    adapter: str | None = None


_SECTIONS = {
    "model": ModelConfig, "data": DataConfig, "train": TrainConfig, "sample": SampleConfig,
    "guidance": GuidanceConfig, "retrofit": RetrofitConfig, "analysis": AnalysisConfig,
    "sweep": SweepConfig, "io": IOConfig,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    retrofit: RetrofitConfig = field(default_factory=RetrofitConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    io: IOConfig = field(default_factory=IOConfig)
    explicit: frozenset = frozenset()  # sections present in the source document

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        for key in d:
            if key not in _SECTIONS:
                raise ConfigError(f"unknown key {key}")
        parts = {name: _strict(kind, name, d.get(name)) for name, kind in _SECTIONS.items()}
        return cls(**parts, explicit=frozenset(d))

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def replace(self, section: str, **changes) -> "RunConfig":
        current = asdict(getattr(self, section))
        current.update(changes)
        parts = {name: getattr(self, name) for name in _SECTIONS}
        parts[section] = _strict(_SECTIONS[section], section, current)
        return RunConfig(**parts, explicit=self.explicit)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


class MetricsLog:
    """Append-only (step, metric, value, wall_clock) rows; steps never decrease per metric."""

    header = ("step", "metric", "value", "wall_clock")

    def __init__(self, clock=time.monotonic):
        self.rows: list[tuple[int, str, float, float]] = []
        self._last: dict[str, int] = {}
        self._clock = clock
        self._t0 = clock()

    def append(self, step: int, metric: str, value: float) -> None:
        if step < self._last.get(metric, step):
            raise ConfigError(f"metric {metric!r} step went backwards ({self._last[metric]} -> {step})")
        self._last[metric] = step
        self.rows.append((int(step), metric, float(value), self._clock() - self._t0))

    def series(self, metric: str) -> list[tuple[int, float]]:
        return [(s, v) for s, m, v, _ in self.rows if m == metric]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.header)
            for s, m, v, t in self.rows:
                w.writerow([s, m, f"{v:.6g}", f"{t:.3f}"])
