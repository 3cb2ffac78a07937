"""Report figures, rendered off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(losses: Sequence[float], eval_loss: Sequence[tuple[int, float]], path, window: int = 50):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    losses = np.asarray(losses, float)
    if len(losses):
        ax.plot(np.arange(1, len(losses) + 1), losses, lw=0.5, alpha=0.4, label="batch")
        if len(losses) >= window:
            smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
            ax.plot(np.arange(window, len(losses) + 1), smooth, lw=1.2, label=f"{window}-step mean")
    if eval_loss:
        s, v = zip(*eval_loss)
        ax.plot(s, v, "o-", ms=3, label="held-out")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    return _save(fig, path)


def tradeoff(curves: dict[str, tuple[Sequence[float], Sequence[float], Sequence[str]]], path,
             xlabel: str = "quality proxy (detail energy)", ylabel: str = "fidelity (oracle match rate)"):
    """One polyline per schedule family; points annotated with their grid value."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for name, (x, y, labels) in curves.items():
        ax.plot(x, y, "o-", ms=4, label=name)
        for xi, yi, lab in zip(x, y, labels):
            ax.annotate(lab, (xi, yi), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    return _save(fig, path)


def layer_profile(curves: dict[str, Sequence[float]], path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, curve in curves.items():
        ax.plot(np.arange(len(curve)), curve, "o-", ms=4, label=name)
    ax.set_xlabel("layer")
    ax.set_ylabel("attention share on feature token")
    ax.legend()
    return _save(fig, path)


def group_mass(shares: dict[str, dict[str, float]], path):
    """Grouped bars: ``shares[run][group]``."""
    runs = list(shares)
    groups = list(dict.fromkeys(g for r in runs for g in shares[r]))
    x = np.arange(len(groups))
    width = 0.8 / max(1, len(runs))
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for k, run in enumerate(runs):
        ax.bar(x + k * width, [shares[run].get(g, 0.0) for g in groups], width, label=run)
    ax.set_xticks(x + width * (len(runs) - 1) / 2, groups)
    ax.set_ylabel("attention share")
    ax.legend()
    return _save(fig, path)


def ablation_scatter(clause_count: Sequence[int], distance: Sequence[float], path, rho: float | None = None):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    cc = np.asarray(clause_count)
    d = np.asarray(distance, float)
    jitter = np.random.default_rng(0).uniform(-0.15, 0.15, len(cc))
    ax.scatter(cc + jitter, d, s=8, alpha=0.5)
    levels = np.unique(cc)
    ax.plot(levels, [d[cc == v].mean() for v in levels], "k-o", ms=4, label="mean")
    ax.set_xlabel("clauses in prompt")
    ax.set_ylabel("distance with vs without pooled")
    if rho is not None:
        ax.set_title(f"Spearman rho = {rho:.3f}")
    ax.legend()
    return _save(fig, path)


def image_grid(images: np.ndarray, path, ncol: int = 8, titles: Sequence[str] | None = None):
    n = len(images)
    ncol = max(1, min(ncol, n))
    nrow = max(1, -(-n // ncol))
    fig, axes = plt.subplots(nrow, ncol, figsize=(1.2 * ncol, 1.3 * nrow), squeeze=False)
    for k, ax in enumerate(axes.flat):
        ax.axis("off")
        if k < n:
            ax.imshow(to_uint8(images[k]).transpose(1, 2, 0), interpolation="nearest")
            if titles is not None:
                ax.set_title(titles[k], fontsize=5)
    return _save(fig, path)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[-1, 1] floats to 0..255 bytes, channel-first preserved."""
    return np.round((np.clip(image, -1, 1) + 1) * 127.5).astype(np.uint8)
