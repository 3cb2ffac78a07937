"""Command-line entry point: ``modguide {train,generate,sweep,retrofit,ablate,attn}``.

Each command reads a JSON config (unknown keys rejected), applies the
``--seed``/``--out`` overrides, writes the resolved config next to its
outputs and exits 0 on success, 2 on a configuration error, 3 on a
checkpoint problem and 4 on a numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import analysis, checkpoint, plotting
from .config import MetricsLog, RunConfig
from .dit import DiT
from .errors import CheckpointError, ConfigError, ModguideError
from .guidance import GuidanceSchedule, GuidanceSpec, task_spec
from .retrofit import RetrofitModel, load_adapter, retrofit_train, save_adapter
from .sampling import sample
from .toyworld import ToyPrompt, describe, detail_energy, detect_scene, random_scene, sample_dataset
from .train import train

log = logging.getLogger("modguide")

COMMANDS = ("train", "generate", "sweep", "retrofit", "ablate", "attn")


# -- shared plumbing --------------------------------------------------------------

def _fmt(v) -> str:
    return f"{float(v):.6g}"


def prepare_out(out: str | Path, force: bool) -> Path:
    out = Path(out)
    if out.exists():
        if not force:
            raise ConfigError(f"output directory {out} exists; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True)
    return out


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary P6 file from a [3, H, W] image in [-1, 1]."""
    px = plotting.to_uint8(image).transpose(1, 2, 0)
    h, w, _ = px.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + px.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ConfigError(f"{path} is not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    px = np.frombuffer(parts[3], np.uint8).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float32) / 127.5 - 1.0


def load_model(cfg: RunConfig):
    """The checkpointed model, wrapped with its adapter when ``io.adapter`` is set."""
    path = cfg.io.checkpoint
    if not path:
        raise ConfigError("io.checkpoint is required for this command")
    digest = checkpoint.file_hash(path) if Path(path).exists() else None
    if digest is None:
        raise CheckpointError(f"checkpoint {path} does not exist")
    if cfg.io.checkpoint_hash and cfg.io.checkpoint_hash != digest:
        raise CheckpointError(f"checkpoint {path} has hash {digest}, config expects {cfg.io.checkpoint_hash}")
    model = checkpoint.load_model(path)
    if "model" in cfg.explicit and cfg.model != model.cfg:
        raise CheckpointError(f"checkpoint {path} was built with a different model config")
    if cfg.io.adapter:
        return RetrofitModel(model, load_adapter(cfg.io.adapter, digest))
    return model


def panel_prompts(cfg: RunConfig, n: int | None = None, require: str | None = None) -> list[ToyPrompt]:
    s = cfg.sample
    if s.prompts:
        prompts = [ToyPrompt.parse(p) for p in s.prompts]
        return (prompts * (-(-(n or len(prompts)) // len(prompts))))[: n or len(prompts)]
    rng = np.random.default_rng(s.prompt_seed)
    prompts = []
    while len(prompts) < (n or s.count):
        scene = random_scene(rng)
        if require == "layout" and scene.layout is None:
            continue
        p = describe(scene, rng)
        if require and p.get(require) is None:
            value = scene.layout if require == "layout" else None
            if value is None:
                continue
            p = p.with_clauses((require, value))
        prompts.append(p)
    return prompts


def guidance_specs(cfg: RunConfig, prompts, n_layers: int, task: str | None = None,
                   schedule: GuidanceSchedule | None = None) -> list[GuidanceSpec] | None:
    g = cfg.guidance
    task = task or g.task
    if schedule is None and g.schedule is not None:
        schedule = GuidanceSchedule.from_dict(g.schedule, n_layers)
    if g.positive is not None:
        if schedule is None:
            raise ConfigError("guidance.positive needs guidance.schedule")
        pos, neg = ToyPrompt.parse(g.positive), ToyPrompt.parse(g.negative or "")
        return [GuidanceSpec(p, pos, neg, schedule) for p in prompts]
    if task is None:
        return None
    return [task_spec(task, p, n_layers, schedule, g.index_mode) for p in prompts]


def _required_clause(task: str | None) -> str | None:
    return "layout" if task == "position" else None


def oracle_rows(images, prompts, seeds):
    rows = []
    for k, (img, p, seed) in enumerate(zip(images, prompts, seeds)):
        d = detect_scene(img)
        rows.append({
            "index": k, "prompt": p.canonical, "seed": seed, "accepted": int(not d.rejected),
            "count": d.count, "color": d.color or "", "textured": int(d.textured),
            "match": int(d.satisfies(p)),
            "count_match": int(not d.rejected and str(d.count) == p.get("count")),
            "detail_energy": detail_energy(img),
        })
    return rows


def _fidelity(rows) -> float:
    return float(np.mean([r["match"] for r in rows]))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) if isinstance(r[h], float) else r[h] for h in header])


# -- commands ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig, out: Path) -> dict:
    ds = sample_dataset(cfg.data.seed, cfg.data.size)
    model = DiT(cfg.model)
    metrics = MetricsLog()
    hist = train(model, ds, cfg.train, on_step=lambda s, v: metrics.append(s + 1, "loss", v))
    for s, v in hist["eval_loss"]:
        metrics.append(s, "eval_loss", v)
    digest = checkpoint.save_model(model, out / "model.ckpt", {"train": cfg.train.to_dict(), "data": vars(cfg.data)})
    metrics.to_csv(out / "metrics.csv")
    plotting.loss_curve(hist["loss"], hist["eval_loss"], out / "loss.png")
    first, last = hist["eval_loss"][0][1], hist["eval_loss"][-1][1]
    return {"checkpoint_hash": digest, "eval_loss_initial": first, "eval_loss_final": last}


def cmd_generate(cfg: RunConfig, out: Path) -> dict:
    model = load_model(cfg)
    prompts = panel_prompts(cfg, require=_required_clause(cfg.guidance.task))
    seeds = [cfg.sample.seed + k for k in range(len(prompts))]
    specs = guidance_specs(cfg, prompts, model.n_layers)
    images = sample(model, prompts, seeds, specs, steps=cfg.sample.steps, cfg=cfg.sample.cfg)
    img_dir = out / "images"
    img_dir.mkdir()
    for k, img in enumerate(images):
        write_ppm(img_dir / f"{k:04d}.ppm", img)
    rows = oracle_rows(images, prompts, seeds)
    header = ["index", "prompt", "seed", "accepted", "count", "color", "textured", "match", "count_match",
              "detail_energy"]
    summary = {"index": "summary", "prompt": "", "seed": "",
               "accepted": float(np.mean([r["accepted"] for r in rows])), "count": "", "color": "",
               "textured": float(np.mean([r["textured"] for r in rows])),
               "match": _fidelity(rows), "count_match": float(np.mean([r["count_match"] for r in rows])),
               "detail_energy": float(np.mean([r["detail_energy"] for r in rows]))}
    _write_rows(out / "detections.csv", header, rows + [summary])
    plotting.image_grid(images[:64], out / "grid.png", titles=[p.canonical for p in prompts[:64]])
    return {"match_rate": summary["match"], "count_match_rate": summary["count_match"]}


def sweep_points(cfg: RunConfig, model, prompts, seeds) -> list[dict]:
    """Evaluate the prompt panel at every grid value; returns one row per (family, value)."""
    sw, L = cfg.sweep, model.n_layers
    mode = cfg.guidance.index_mode
    cache: dict = {}

    def run(family, value, sched, cfg_scale):
        key = (tuple(sched.values()) if sched else None, cfg_scale)
        if key not in cache:
            specs = None if sched is None else guidance_specs(cfg, prompts, L, sw.task, sched)
            imgs = sample(model, prompts, seeds, specs, steps=cfg.sample.steps, cfg=cfg_scale)
            cache[key] = oracle_rows(imgs, prompts, seeds)
        rows = cache[key]
        named = sched.named if sched else {}
        return {"family": family, "value": float(value), "w": float(named.get("w", 0.0)),
                "i": float(named.get("i", 0.0)), "cfg": float(cfg_scale), "fidelity": _fidelity(rows),
                "count_match": float(np.mean([r["count_match"] for r in rows])),
                "quality": float(np.mean([r["detail_energy"] for r in rows])), "n": len(rows)}

    out = []
    for v in sw.grid:
        if sw.axis == "w":
            out.append(run("constant", v, GuidanceSchedule.constant(v, L, mode), cfg.sample.cfg))
            out.append(run("step", v, GuidanceSchedule.step(sw.i, v, L, mode), cfg.sample.cfg))
        elif sw.axis == "i":
            out.append(run("step", v, GuidanceSchedule.step(v, sw.w, L, mode), cfg.sample.cfg))
        else:
            sched = None
            if cfg.guidance.schedule is not None or cfg.guidance.task is not None:
                sched = (GuidanceSchedule.from_dict(cfg.guidance.schedule, L) if cfg.guidance.schedule
                         else task_spec(sw.task, prompts[0], L, index_mode=mode).schedule)
            out.append(run("cfg", v, sched, float(v)))
    if sw.axis == "i":
        # constant reference at the same scale for the dominance comparison
        out.append(run("constant", sw.w, GuidanceSchedule.constant(sw.w, L, mode), cfg.sample.cfg))
    return out


SWEEP_HEADER = ["family", "value", "w", "i", "cfg", "fidelity", "count_match", "quality", "n"]


def cmd_sweep(cfg: RunConfig, out: Path) -> dict:
    model = load_model(cfg)
    prompts = panel_prompts(cfg, require=_required_clause(cfg.sweep.task))
    seeds = [cfg.sample.seed + k for k in range(len(prompts))]
    rows = sweep_points(cfg, model, prompts, seeds)
    _write_rows(out / f"sweep_{cfg.sweep.axis}.csv", SWEEP_HEADER, rows)
    curves = {}
    for fam in dict.fromkeys(r["family"] for r in rows):
        pts = [r for r in rows if r["family"] == fam]
        curves[fam] = ([r["quality"] for r in pts], [r["fidelity"] for r in pts], [f"{r['value']:g}" for r in pts])
    plotting.tradeoff(curves, out / f"sweep_{cfg.sweep.axis}.png")
    return {"points": len(rows)}


def cmd_retrofit(cfg: RunConfig, out: Path) -> dict:
    if not cfg.io.checkpoint:
        raise ConfigError("io.checkpoint (the pooled-free base) is required")
    base_hash = checkpoint.file_hash(cfg.io.checkpoint) if Path(cfg.io.checkpoint).exists() else None
    if base_hash is None:
        raise CheckpointError(f"checkpoint {cfg.io.checkpoint} does not exist")
    base = checkpoint.load_model(cfg.io.checkpoint)
    before = checkpoint.parameter_bytes(base)
    r = cfg.retrofit
    ds = sample_dataset(cfg.data.seed, cfg.data.size)
    run = retrofit_train(base, ds, r.iterations, r.lr, r.batch, r.d_adapter, r.seed, base_hash)
    if checkpoint.parameter_bytes(base) != before:
        raise CheckpointError("base parameters changed during retrofit")
    save_adapter(run.adapter, out / "adapter.ckpt", base_hash, {"iterations": run.iterations})
    metrics = MetricsLog()
    for k, v in enumerate(run.losses):
        metrics.append(k + 1, "distill_loss", v)
    metrics.to_csv(out / "metrics.csv")
    plotting.loss_curve(run.losses, [], out / "loss.png")
    summary = {"base_hash": base_hash, "iterations": run.iterations}
    if run.losses:
        summary["loss_initial"] = run.losses[0]
        summary["loss_final_avg100"] = run.moving_average(len(run.losses))
    return summary


def cmd_ablate(cfg: RunConfig, out: Path) -> dict:
    model = load_model(cfg)
    a = cfg.analysis
    prompts = analysis.ablation_prompts(a.prompts, a.prompt_seed)
    report = analysis.pooled_ablation(model, prompts, a.seeds, steps=cfg.sample.steps, cfg=cfg.sample.cfg)
    report.to_csv(out / "ablation.csv")
    x, y = report.per_prompt()
    plotting.ablation_scatter(x, y, out / "ablation.png", report.spearman)
    return {"spearman": report.spearman, "p_value": report.p_value,
            "max_distance": float(max(r.cosine_dist for r in report.rows))}


def cmd_attn(cfg: RunConfig, out: Path) -> dict:
    model = load_model(cfg)
    a = cfg.analysis
    sub = RunConfig.from_dict({"sample": {**vars(cfg.sample), "count": a.prompts, "prompt_seed": a.prompt_seed}})
    prompts = panel_prompts(sub, require=_required_clause(a.task))
    seeds = [cfg.sample.seed + k for k in range(len(prompts))]
    groupings = [analysis.counting_grouping(p) for p in prompts]
    kw = dict(steps=cfg.sample.steps, cfg=cfg.sample.cfg, layers=a.layers, step_filter=a.steps)
    plain = analysis.group_mass_run(model, prompts, seeds, groupings, None, **kw)
    specs = guidance_specs(cfg, prompts, model.n_layers, a.task)
    guided = analysis.group_mass_run(model, prompts, seeds, groupings, specs, **kw)
    rows = []
    for run, shares in (("unguided", plain), ("guided", guided)):
        for g, v in shares.items():
            rows.append((run, g, float(v.mean())))
        for k in range(len(prompts)):
            for g, v in shares.items():
                rows.append((f"{run}/{k}", g, float(v[k])))
    analysis.write_group_mass_csv(out / "group_mass.csv", rows)
    diff, p = analysis.paired_permutation_test(guided["target"], plain["target"], "greater")
    plotting.group_mass({run: {g: float(v.mean()) for g, v in s.items()}
                         for run, s in (("unguided", plain), ("guided", guided))}, out / "group_mass.png")
    curves = {}
    for feat in a.features:
        prof = analysis.layer_attention_profile(model, prompts, feat, seeds, cfg.sample.steps, cfg.sample.cfg)
        prof.to_csv(out / f"layer_profile_{feat}.csv")
        curves[feat] = prof.mean_mass
    plotting.layer_profile(curves, out / "layer_profile.png")
    return {"target_share_unguided": float(plain["target"].mean()),
            "target_share_guided": float(guided["target"].mean()), "paired_diff": diff, "p_value": p}


_HANDLERS = {"train": cmd_train, "generate": cmd_generate, "sweep": cmd_sweep,
             "retrofit": cmd_retrofit, "ablate": cmd_ablate, "attn": cmd_attn}

# the section each command's --seed override lands in
_SEED_SECTION = {"train": "train", "generate": "sample", "sweep": "sample", "retrofit": "retrofit",
                 "ablate": "sample", "attn": "sample"}


def preset_path(name: str) -> Path:
    """Path of a bundled experiment preset (``aesthetics``, ``counting``, ``position``, ...)."""
    ref = resources.files("modguide") / "presets" / f"{name}.json"
    if not ref.is_file():
        raise ConfigError(f"no preset named {name!r}")
    return Path(str(ref))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modguide", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file, or preset:<name>")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--force", action="store_true", help="overwrite an existing output directory")
        p.add_argument("--checkpoint", help="override io.checkpoint")
        p.add_argument("--adapter", help="override io.adapter")
        if name == "sweep":
            p.add_argument("--axis", choices=("w", "i", "cfg"))
    return parser


def resolve(args) -> RunConfig:
    source = args.config
    if source and source.startswith("preset:"):
        source = preset_path(source.split(":", 1)[1])
    cfg = RunConfig.load(source)
    if args.seed is not None:
        cfg = cfg.replace(_SEED_SECTION[args.command], seed=args.seed)
    io = {k: v for k, v in (("out", args.out), ("checkpoint", args.checkpoint), ("adapter", args.adapter)) if v}
    if io:
        cfg = cfg.replace("io", **io)
    if getattr(args, "axis", None):
        cfg = cfg.replace("sweep", axis=args.axis)
    return cfg


def run(argv=None) -> dict:
    """Parse ``argv`` and execute; raises ModguideError subclasses on failure."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg = resolve(args)
    out = prepare_out(cfg.io.out, args.force)
    cfg.write(out / "config.json")
    summary = _HANDLERS[args.command](cfg, out)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def main(argv=None) -> int:
    try:
        summary = run(argv)
    except ModguideError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
