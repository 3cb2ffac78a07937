"""Shared fixtures: an on-disk cache of trained models so the slow suite trains each one once."""

import hashlib
import json
import os
from pathlib import Path

import pytest

from modguide import checkpoint
from modguide.dit import DiT, ModelConfig
from modguide.toyworld import sample_dataset
from modguide.train import TrainConfig, train

CACHE = Path(os.environ.get("MODGUIDE_TEST_CACHE", Path(__file__).resolve().parent.parent / ".test_cache"))

# criterion lines collected by the acceptance module, echoed in the terminal summary
RESULTS: dict[int, str] = {}


def trained_model(model_cfg: ModelConfig, train_cfg: TrainConfig, data_seed: int = 0, data_size: int = 10000):
    """Train (or load from cache) a model; returns ``(model, history, checkpoint path)``."""
    spec = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "data": [data_seed, data_size]}
    key = hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()[:16]
    ckpt, hist_path = CACHE / f"{key}.ckpt", CACHE / f"{key}.json"
    if ckpt.exists() and hist_path.exists():
        return checkpoint.load_model(ckpt), json.loads(hist_path.read_text()), ckpt
    CACHE.mkdir(parents=True, exist_ok=True)
    model = DiT(model_cfg)
    hist = train(model, sample_dataset(data_seed, data_size), train_cfg)
    checkpoint.save_model(model, ckpt, {"train": train_cfg.to_dict()})
    hist_path.write_text(json.dumps(hist))
    return model, hist, ckpt


@pytest.fixture(scope="session")
def default_run():
    return trained_model(ModelConfig(), TrainConfig())


@pytest.fixture(scope="session")
def pooled_free_run():
    return trained_model(ModelConfig(use_pooled=False), TrainConfig(pooled_dropout=0.0))


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
