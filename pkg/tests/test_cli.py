import csv
import json

import numpy as np
import pytest

from modguide import checkpoint, cli
from modguide.config import MetricsLog, RunConfig
from modguide.errors import ConfigError
from modguide.retrofit import PooledAdapter, load_adapter

MODEL = {"n_layers": 2, "d_model": 16, "heads": 2, "t_dim": 16}
FREE = {**MODEL, "use_pooled": False}


def write_cfg(path, **sections):
    base = {"model": MODEL, "data": {"size": 48}, "train": {"steps": 6, "batch": 4, "warmup": 2, "eval_size": 8},
            "sample": {"steps": 2, "count": 3}}
    base.update(sections)
    path.write_text(json.dumps(base))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(d / "train.json")
    assert cli.main(["train", "--config", cfg, "--out", str(d / "run")]) == 0
    return d, d / "run" / "model.ckpt"


@pytest.fixture(scope="module")
def pooled_free(tmp_path_factory):
    d = tmp_path_factory.mktemp("free")
    cfg = write_cfg(d / "train.json", model=FREE,
                    train={"steps": 4, "batch": 4, "warmup": 2, "eval_size": 8, "pooled_dropout": 0.0})
    assert cli.main(["train", "--config", cfg, "--out", str(d / "run")]) == 0
    return d / "run" / "model.ckpt"


def test_train_outputs(trained):
    d, ckpt = trained
    run = d / "run"
    for name in ("model.ckpt", "metrics.csv", "loss.png", "config.json", "summary.json"):
        assert (run / name).exists()
    summary = json.loads((run / "summary.json").read_text())
    assert summary["checkpoint_hash"] == checkpoint.file_hash(ckpt)
    assert checkpoint.load_model(ckpt).trained_steps == 6
    header = open(run / "metrics.csv").readline().strip()
    assert header == "step,metric,value,wall_clock"


def test_training_rerun_is_byte_identical(trained, tmp_path):
    d, ckpt = trained
    cfg = write_cfg(tmp_path / "c.json")
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "model.ckpt").read_bytes() == ckpt.read_bytes()


def test_existing_output_needs_force(trained):
    d, _ = trained
    cfg = write_cfg(d / "t2.json")
    assert cli.main(["train", "--config", cfg, "--out", str(d / "run")]) == 2


def test_unknown_key_is_exit_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", sample={"steps": 2, "bogus": 1})
    assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "bogus" in capsys.readouterr().err


def test_missing_or_mismatched_checkpoint_is_exit_3(trained, tmp_path):
    _, ckpt = trained
    cfg = write_cfg(tmp_path / "c.json")
    assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "a"), "--checkpoint",
                     str(tmp_path / "nope.ckpt")]) == 3
    bad = write_cfg(tmp_path / "h.json", io={"checkpoint": str(ckpt), "checkpoint_hash": "0" * 64})
    assert cli.main(["generate", "--config", bad, "--out", str(tmp_path / "b")]) == 3
    other = write_cfg(tmp_path / "m.json", model={**MODEL, "n_layers": 3}, io={"checkpoint": str(ckpt)})
    assert cli.main(["generate", "--config", other, "--out", str(tmp_path / "c")]) == 3


def test_generate_is_deterministic_with_summary_row(trained, tmp_path):
    _, ckpt = trained
    cfg = write_cfg(tmp_path / "c.json", io={"checkpoint": str(ckpt)})
    for name in ("a", "b"):
        assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / name), "--seed", "5"]) == 0
    for k in range(3):
        f = f"images/{k:04d}.ppm"
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert (tmp_path / "a/detections.csv").read_bytes() == (tmp_path / "b/detections.csv").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a/detections.csv")))
    assert len(rows) == 4 and rows[-1]["index"] == "summary"
    assert [r["seed"] for r in rows[:3]] == ["5", "6", "7"]
    assert json.loads((tmp_path / "a/config.json").read_text())["sample"]["seed"] == 5


def test_zero_schedule_matches_no_guidance(trained, tmp_path):
    _, ckpt = trained
    plain = write_cfg(tmp_path / "p.json", io={"checkpoint": str(ckpt)})
    zero = write_cfg(tmp_path / "z.json", io={"checkpoint": str(ckpt)},
                     guidance={"task": "counting", "schedule": {"kind": "constant", "params": [0.0]}})
    assert cli.main(["generate", "--config", plain, "--out", str(tmp_path / "p")]) == 0
    assert cli.main(["generate", "--config", zero, "--out", str(tmp_path / "z")]) == 0
    for k in range(3):
        f = f"images/{k:04d}.ppm"
        assert (tmp_path / "p" / f).read_bytes() == (tmp_path / "z" / f).read_bytes()


def test_ppm_roundtrip(tmp_path):
    img = np.random.default_rng(0).uniform(-1, 1, (3, 16, 16)).astype(np.float32)
    cli.write_ppm(tmp_path / "x.ppm", img)
    assert np.abs(cli.read_ppm(tmp_path / "x.ppm") - img).max() <= 1 / 127.5 + 1e-6


def test_sweep_rows(trained, tmp_path):
    _, ckpt = trained
    cfg = write_cfg(tmp_path / "c.json", io={"checkpoint": str(ckpt)}, sweep={"axis": "w", "grid": [0, 2]})
    assert cli.main(["sweep", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "s/sweep_w.csv")))
    assert [(r["family"], r["value"]) for r in rows] == [("constant", "0"), ("step", "0"), ("constant", "2"),
                                                          ("step", "2")]
    # at w = 0 both families are the unguided sampler
    assert rows[0]["fidelity"] == rows[1]["fidelity"] and rows[0]["quality"] == rows[1]["quality"]
    assert cli.main(["sweep", "--config", cfg, "--out", str(tmp_path / "i"), "--axis", "i"]) == 0
    rows = list(csv.DictReader(open(tmp_path / "i/sweep_i.csv")))
    assert rows[-1]["family"] == "constant"


def test_retrofit_zero_iterations_is_fresh_adapter(pooled_free, tmp_path):
    cfg = write_cfg(tmp_path / "c.json", model=FREE, io={"checkpoint": str(pooled_free)},
                    retrofit={"iterations": 0})
    assert cli.main(["retrofit", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    a = load_adapter(tmp_path / "r/adapter.ckpt", checkpoint.file_hash(pooled_free))
    fresh = PooledAdapter(a.d_pool, a.t_dim, 64, seed=11)
    assert checkpoint.parameter_bytes(a) == checkpoint.parameter_bytes(fresh)


def test_retrofit_then_generate_with_adapter(pooled_free, tmp_path):
    before = pooled_free.read_bytes()
    cfg = write_cfg(tmp_path / "c.json", model=FREE, io={"checkpoint": str(pooled_free)},
                    retrofit={"iterations": 3, "batch": 4})
    assert cli.main(["retrofit", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    assert pooled_free.read_bytes() == before
    summary = json.loads((tmp_path / "r/summary.json").read_text())
    assert summary["iterations"] == 3 and "loss_final_avg100" in summary
    assert cli.main(["generate", "--config", cfg, "--out", str(tmp_path / "g"),
                     "--adapter", str(tmp_path / "r/adapter.ckpt")]) == 0


def test_adapter_for_other_base_is_exit_3(trained, pooled_free, tmp_path):
    _, ckpt = trained
    cfg = write_cfg(tmp_path / "c.json", model=FREE, io={"checkpoint": str(pooled_free)},
                    retrofit={"iterations": 0})
    assert cli.main(["retrofit", "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    gen = write_cfg(tmp_path / "g.json", io={"checkpoint": str(ckpt), "adapter": str(tmp_path / "r/adapter.ckpt")})
    assert cli.main(["generate", "--config", gen, "--out", str(tmp_path / "g")]) == 3


def test_ablate_on_pooled_free_model(pooled_free, tmp_path):
    cfg = write_cfg(tmp_path / "c.json", model=FREE, io={"checkpoint": str(pooled_free)},
                    analysis={"prompts": 4, "seeds": [0]})
    assert cli.main(["ablate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "a/ablation.csv")))
    assert len(rows) == 4 and all(float(r["cosine_dist"]) == 0.0 for r in rows)


def test_attn_shares_sum_to_one(trained, tmp_path):
    _, ckpt = trained
    cfg = write_cfg(tmp_path / "c.json", io={"checkpoint": str(ckpt)},
                    analysis={"prompts": 3, "features": ["count"]})
    assert cli.main(["attn", "--config", cfg, "--out", str(tmp_path / "t")]) == 0
    rows = list(csv.reader(open(tmp_path / "t/group_mass.csv")))
    totals: dict[str, float] = {}
    for run, _, share in rows[1:]:
        totals[run] = totals.get(run, 0.0) + float(share)
    assert set(totals) >= {"unguided", "guided"}
    assert all(abs(v - 1.0) < 1e-4 for v in totals.values())
    assert (tmp_path / "t/layer_profile_count.csv").exists()


def test_presets_load():
    for name in ("aesthetics", "counting", "position", "train", "pooled_free"):
        RunConfig.load(cli.preset_path(name))
    with pytest.raises(ConfigError):
        cli.preset_path("nothing")


def test_metrics_log_is_append_only(tmp_path):
    m = MetricsLog()
    m.append(1, "loss", 0.5)
    m.append(2, "loss", 0.4)
    with pytest.raises(ConfigError):
        m.append(1, "loss", 0.3)
    m.to_csv(tmp_path / "m.csv")
    assert m.series("loss") == [(1, 0.5), (2, 0.4)]
