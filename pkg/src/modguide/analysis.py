"""Measurements on trained toy models.

Three studies live here: how much sampled images change when the pooled
embedding is removed (as a function of prompt redundancy), where image tokens
attend among the text tokens with and without guidance, and which layers
attend to a given clause. CSV writers print floats with 6 significant digits.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import ConfigError, DimensionError, NumericError
from .guidance import GuidanceSpec, build_guided_y
from .nn import no_grad
from .nn.tensor import Tensor
from .sampling import initial_noise, sample
from .toyworld import N_TEXT, ToyPrompt, encode_batch, random_scene

log = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-5


def _fmt(v: float) -> str:
    return f"{float(v):.6g}"


def _require_trained(model) -> None:
    base = getattr(model, "base", model)
    if getattr(base, "trained_steps", 0) <= 0:
        raise ConfigError("model has not been trained; analyses on an untrained model are meaningless")


# -- statistics ---------------------------------------------------------------------

def paired_permutation_test(a, b, alternative: str = "greater", n_resamples: int = 10000,
                            seed: int = 0) -> tuple[float, float]:
    """Mean paired difference ``a - b`` and its sign-flip permutation p-value."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise DimensionError("paired samples must have equal shapes")
    diff = float(np.mean(a - b))
    if np.all(a == b):
        return diff, 1.0
    res = stats.permutation_test((a, b), lambda x, y, axis: np.mean(x - y, axis=axis),
                                 permutation_type="samples", alternative=alternative,
                                 n_resamples=n_resamples, vectorized=True, random_state=seed)
    return diff, float(res.pvalue)


def spearman_permutation(x, y, alternative: str = "less", n_resamples: int = 5000,
                         seed: int = 0) -> tuple[float, float]:
    """Spearman rho and a permutation p-value (nan, 1.0 when either side is constant)."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan"), 1.0
    rho = stats.spearmanr(x, y).statistic
    res = stats.permutation_test((x, y), lambda u, v: stats.spearmanr(u, v).statistic,
                                 permutation_type="pairings", alternative=alternative,
                                 n_resamples=n_resamples, random_state=seed)
    return float(rho), float(res.pvalue)


# -- image distance -----------------------------------------------------------------

def image_distance(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """(1 - cosine similarity of the flattened images, mean squared error)."""
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if np.array_equal(a, b):
        return 0.0, 0.0
    mse = float(np.mean((a - b) ** 2))
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        cos = 0.0 if na == nb else 1.0
    else:
        cos = float(np.clip(1.0 - a @ b / (na * nb), 0.0, 2.0))
    return cos, mse


# -- pooled ablation ------------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    prompt_id: int
    clause_count: int
    seed: int
    cosine_dist: float
    mse: float


@dataclass
class AblationReport:
    rows: list[AblationRow]
    spearman: float
    p_value: float

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["prompt_id", "clause_count", "seed", "cosine_dist", "mse"])
            for r in self.rows:
                w.writerow([r.prompt_id, r.clause_count, r.seed, _fmt(r.cosine_dist), _fmt(r.mse)])

    def per_prompt(self) -> tuple[np.ndarray, np.ndarray]:
        """Clause count and seed-averaged cosine distance per prompt id."""
        ids = sorted({r.prompt_id for r in self.rows})
        counts = {r.prompt_id: r.clause_count for r in self.rows}
        dist = np.array([np.mean([r.cosine_dist for r in self.rows if r.prompt_id == i]) for i in ids])
        return np.array([counts[i] for i in ids]), dist


def ablation_prompts(n: int, seed: int = 0, max_redundant: int = N_TEXT - 3) -> list[ToyPrompt]:
    """Core prompts (count, color, detail) padded with 0..max_redundant restated clauses.

    Holding the informative content fixed means clause count varies only
    through redundancy.
    """
    rng = np.random.default_rng(seed)
    prompts = []
    for _ in range(n):
        s = random_scene(rng)
        core = (("count", str(s.count)), ("color", s.color), ("detail", s.detail))
        r = int(rng.integers(0, max_redundant + 1))
        prompts.append(ToyPrompt(core + tuple(core[int(j)] for j in rng.integers(0, 3, size=r))))
    return prompts


def pooled_ablation(model, prompts: Sequence[ToyPrompt], seeds: Sequence[int], steps: int = 20,
                    cfg: float = 1.0, n_resamples: int = 5000, chunk: int = 100) -> AblationReport:
    """Sample every (prompt, seed) with and without the pooled embedding and compare."""
    _require_trained(model)
    if not prompts or not seeds:
        raise ConfigError("ablation needs at least one prompt and one seed")
    rows = []
    for seed in seeds:
        for lo in range(0, len(prompts), chunk):
            part = list(prompts[lo:lo + chunk])
            sd = [int(seed)] * len(part)
            with_pool = sample(model, part, sd, steps=steps, cfg=cfg)
            without = sample(model, part, sd, steps=steps, cfg=cfg, zero_pooled=True)
            for k, (p, a, b) in enumerate(zip(part, with_pool, without)):
                cos, mse = image_distance(a, b)
                rows.append(AblationRow(lo + k, len(p.clauses), int(seed), cos, mse))
    rows.sort(key=lambda r: (r.prompt_id, r.seed))
    report = AblationReport(rows, float("nan"), 1.0)
    x, y = report.per_prompt()
    report.spearman, report.p_value = spearman_permutation(x, y, "less", n_resamples)
    return report


# -- attention traces ----------------------------------------------------------------------

@dataclass
class AttentionTrace:
    """Image-query to text-key attention, [steps, layers, batch, heads, n_img, n_text]."""

    blocks: np.ndarray
    steps: list[int]
    prompt_ids: list[int]

    @property
    def n_text(self) -> int:
        return self.blocks.shape[-1]


@dataclass
class TokenGrouping:
    groups: dict[str, tuple[int, ...]]
    n_text: int = N_TEXT

    def __post_init__(self):
        seen: list[int] = []
        for idx in self.groups.values():
            seen.extend(idx)
        if len(seen) != len(set(seen)):
            raise ConfigError("token groups overlap")
        if sorted(seen) != list(range(self.n_text)):
            raise ConfigError(f"token groups must cover positions 0..{self.n_text - 1} exactly")

    @property
    def names(self) -> list[str]:
        return list(self.groups)


def counting_grouping(prompt: ToyPrompt, n_text: int = N_TEXT) -> TokenGrouping:
    """target = count clauses, related = shape/size, other = remaining clauses, null = padding."""
    groups: dict[str, list[int]] = {"target": [], "related": [], "other": [], "null": []}
    for i in range(n_text):
        if i >= len(prompt.clauses):
            groups["null"].append(i)
        elif prompt.clauses[i][0] == "count":
            groups["target"].append(i)
        elif prompt.clauses[i][0] in ("shape", "size"):
            groups["related"].append(i)
        else:
            groups["other"].append(i)
    return TokenGrouping({k: tuple(v) for k, v in groups.items()}, n_text)


def record_attention(model, prompts: Sequence[ToyPrompt], seeds: Sequence[int],
                     guidance: Sequence[GuidanceSpec] | None = None, steps: int = 20,
                     cfg: float = 1.0) -> tuple[np.ndarray, AttentionTrace]:
    """Sample while keeping the image-to-text attention blocks of every layer and step."""
    n_text = model.cfg.n_text
    kept: list[np.ndarray] = []

    def hook(k, t, att):
        for a in att:
            dev = np.abs(a.sum(axis=-1, dtype=np.float64) - 1.0).max()
            if dev > ROW_SUM_TOL:
                raise NumericError(f"attention rows sum off by {dev:.2e} at step {k}")
        kept.append(np.stack([a[:, :, n_text:, :n_text] for a in att]))

    images = sample(model, prompts, seeds, guidance, steps=steps, cfg=cfg, on_attention=hook)
    return images, AttentionTrace(np.stack(kept), list(range(steps)), list(range(len(prompts))))


def _position_mass(trace: AttentionTrace, layers=None, steps=None) -> np.ndarray:
    """Share of text attention per text position, averaged to [batch, n_text]."""
    blk = trace.blocks
    if steps is not None:
        blk = blk[list(steps)]
    if layers is not None:
        blk = blk[:, list(layers)]
    mass = blk.sum(axis=-2, dtype=np.float64)  # over image queries: [S, L, B, H, n_text]
    share = mass / mass.sum(axis=-1, keepdims=True)
    return share.mean(axis=(0, 1, 3))


def token_group_mass(trace: AttentionTrace, grouping: TokenGrouping | Sequence[TokenGrouping],
                     layers=None, steps=None) -> dict[str, np.ndarray]:
    """Per-sample attention share of each group, averaged over heads, layers and steps."""
    share = _position_mass(trace, layers, steps)
    b = share.shape[0]
    groupings = [grouping] * b if isinstance(grouping, TokenGrouping) else list(grouping)
    if len(groupings) != b:
        raise ConfigError(f"{len(groupings)} groupings for {b} traced samples")
    for g in groupings:
        if g.n_text != trace.n_text:
            raise ConfigError("grouping does not match the trace's text length")
    names = list(dict.fromkeys(n for g in groupings for n in g.names))
    out = {n: np.zeros(b) for n in names}
    for i, g in enumerate(groupings):
        for n, idx in g.groups.items():
            out[n][i] = share[i, list(idx)].sum() if idx else 0.0
    return out


def group_mass_run(model, prompts: Sequence[ToyPrompt], seeds: Sequence[int],
                   groupings: Sequence[TokenGrouping], guidance: Sequence[GuidanceSpec] | None = None,
                   steps: int = 20, cfg: float = 1.0, layers=None, step_filter=None,
                   chunk: int = 50) -> dict[str, np.ndarray]:
    """token_group_mass over a prompt set, sampling in chunks to bound trace memory."""
    parts: list[dict[str, np.ndarray]] = []
    for lo in range(0, len(prompts), chunk):
        sl = slice(lo, lo + chunk)
        g = None if guidance is None else list(guidance[sl])
        _, trace = record_attention(model, list(prompts[sl]), list(seeds[sl]), g, steps, cfg)
        parts.append(token_group_mass(trace, list(groupings[sl]), layers, step_filter))
    names = list(dict.fromkeys(n for part in parts for n in part))
    return {n: np.concatenate([part.get(n, np.zeros(len(next(iter(part.values()))))) for part in parts])
            for n in names}


def write_group_mass_csv(path: str | Path, rows: Sequence[tuple[str, str, float]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["run_id", "group", "share"])
        for run_id, group, share in rows:
            w.writerow([run_id, group, _fmt(share)])


def _feature_positions(prompt: ToyPrompt, feature) -> list[int]:
    if isinstance(feature, int):
        return [feature]
    if isinstance(feature, str):
        return [i for i, c in enumerate(prompt.clauses) if c[0] == feature]
    return [i for i, c in enumerate(prompt.clauses) if c == tuple(feature)]


@dataclass
class LayerProfile:
    mean_mass: np.ndarray  # [L]
    used: int
    skipped: int = 0
    per_prompt: np.ndarray = field(default=None, repr=False)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["layer", "mean_mass"])
            for l, v in enumerate(self.mean_mass):
                w.writerow([l, _fmt(v)])


def layer_attention_profile(model, prompts: Sequence[ToyPrompt], feature, seeds: Sequence[int] | None = None,
                            steps: int = 20, cfg: float = 1.0, chunk: int = 50) -> LayerProfile:
    """Per-layer attention share on ``feature`` (attribute name, clause, or position).

    Prompts lacking the feature are skipped and counted.
    """
    seeds = list(range(len(prompts))) if seeds is None else list(seeds)
    keep = [(p, s, _feature_positions(p, feature)) for p, s in zip(prompts, seeds)]
    skipped = sum(1 for _, _, pos in keep if not pos)
    if skipped:
        log.warning("%d prompt(s) lack feature %r and were skipped", skipped, feature)
    keep = [k for k in keep if k[2]]
    n_layers = model.n_layers
    if not keep:
        return LayerProfile(np.full(n_layers, np.nan), 0, skipped, np.zeros((0, n_layers)))
    rows = []
    for lo in range(0, len(keep), chunk):
        part = keep[lo:lo + chunk]
        _, trace = record_attention(model, [p for p, _, _ in part], [s for _, s, _ in part], steps=steps, cfg=cfg)
        per_layer = np.stack([_position_mass(trace, layers=[l]) for l in range(n_layers)], axis=1)  # [B, L, n_text]
        for i, (_, _, pos) in enumerate(part):
            rows.append(per_layer[i][:, pos].sum(axis=-1))
    per_prompt = np.array(rows)
    return LayerProfile(per_prompt.mean(axis=0), len(keep), skipped, per_prompt)


# -- locality of layer-dependent guidance -------------------------------------------------

def prefix_locality(model, prompts: Sequence[ToyPrompt], seeds: Sequence[int], guidance: Sequence[GuidanceSpec],
                    steps: int = 20) -> np.ndarray:
    """Bitwise equality of pre-modulation activations, guided vs unguided.

    Both forwards see the same ``x_t`` at every step of the unguided
    trajectory. Returns a bool array [steps, layers]; entry (k, l) is True
    when both modulation sites of layer ``l`` received identical inputs.
    """
    pooled, tokens, mask = encode_batch(prompts)
    x = initial_noise(seeds)
    n_layers = model.n_layers
    same = np.zeros((steps, n_layers), bool)
    dt = 1.0 / steps
    with no_grad():
        for k in range(steps):
            t = 1.0 - k * dt
            y = model.global_conditioning(pooled, t).data
            plain, guided = [], []
            v, _ = model.forward(x, tokens, mask, [Tensor(y)] * n_layers, capture=plain)
            model.forward(x, tokens, mask, [Tensor(yl) for yl in build_guided_y(model, guidance, t, y)],
                          capture=guided)
            for l in range(n_layers):
                same[k, l] = all(np.array_equal(a, b) for a, b in zip(plain[l], guided[l]))
            x = x - np.float32(dt) * v.data
    return same
