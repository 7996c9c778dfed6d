"""Command-line entry point: train, stability, probe, sweep, regret."""
from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, diagnostics, linstab
from .envs import make_env
from .losses import Batch, Objectives
from .nets import load_checkpoint, params_from_arrays
from .trainer import PRESETS, TrainConfig, TrainingAborted, fmt, load_validation, runs_root, train

log = logging.getLogger("madtd")


# --------------------------------------------------------------------------
# manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def build_id() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent)
        if out.returncode == 0:
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    config: dict
    seed: int
    build: str
    started: float
    finished: float
    artifacts: dict = field(default_factory=dict)
    checksums: dict = field(default_factory=dict)

    def write(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)


def write_manifest(run_dir: Path, config: TrainConfig, started: float) -> RunManifest:
    files = sorted(p for p in run_dir.iterdir() if p.is_file() and p.name != "manifest.json" and not p.name.endswith(".tmp"))
    m = RunManifest(
        config=config.to_dict(),
        seed=config.seed,
        build=build_id(),
        started=started,
        finished=time.time(),
        artifacts={p.stem if p.suffix == ".csv" else p.name: str(p) for p in files},
        checksums={p.name: sha256_file(p) for p in files if p.suffix in (".csv", ".bin")},
    )
    m.write(run_dir / "manifest.json")
    return m


# --------------------------------------------------------------------------
# argument types


def unit_interval(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {v}")
    return v


def positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


# flag dest -> TrainConfig field
TRAIN_FLAGS = {
    "env": "env",
    "utd": "utd",
    "alpha": "alpha",
    "batch_size": "batch_size",
    "steps": "steps_total",
    "init_random_steps": "init_random_steps",
    "reset_interval": "reset_interval",
    "action_source": "action_source",
    "seed": "seed",
    "hidden": "hidden",
    "latent": "latent",
    "num_bins": "num_bins",
    "probe_interval": "probe_interval",
    "log_interval": "log_interval",
    "name": "name",
}


def resolve_config(args) -> TrainConfig:
    """defaults < preset < JSON config file < command-line flags."""
    d: dict = {}
    if args.config:
        d.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
    preset = args.preset or d.pop("preset", "default")
    merged = dict(PRESETS[preset])
    merged.update(d)
    for dest, key in TRAIN_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            merged[key] = v
    if args.mpc is not None:
        merged["mpc"] = args.mpc == "on"
    return TrainConfig.from_dict(merged)


def add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON file of TrainConfig fields")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--env")
    p.add_argument("--utd", type=positive_int)
    p.add_argument("--alpha", type=unit_interval, help="fraction of each batch replaced by model data")
    p.add_argument("--batch-size", type=positive_int)
    p.add_argument("--steps", type=nonneg_int)
    p.add_argument("--init-random-steps", type=nonneg_int)
    p.add_argument("--reset-interval", type=nonneg_int, help="0 disables resets")
    p.add_argument("--action-source", choices=["policy", "random", "uniform_random"])
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden", type=positive_int)
    p.add_argument("--latent", type=positive_int)
    p.add_argument("--num-bins", type=positive_int)
    p.add_argument("--probe-interval", type=nonneg_int)
    p.add_argument("--log-interval", type=positive_int)
    p.add_argument("--mpc", choices=["on", "off"])
    p.add_argument("--name")
    p.add_argument("--runs-dir", help="artifact root (default: $MADTD_RUNS_DIR or ./runs)")


# --------------------------------------------------------------------------
# commands


def run_one(config: TrainConfig, runs_dir) -> dict:
    started = time.time()
    summary = train(config, runs_dir)
    write_manifest(runs_root(runs_dir) / config.run_name(), config, started)
    return summary


def cmd_train(args) -> int:
    config = resolve_config(args)
    try:
        summary = run_one(config, args.runs_dir)
    except TrainingAborted as exc:
        print(f"training aborted: {exc} (state dumped to {exc.dump_dir})", file=sys.stderr)
        return 3
    out = {k: summary[k] for k in ("run", "final_return", "mean_return", "regret", "episodes", "wall_clock_s")}
    print(json.dumps(out, indent=2))
    return 0


def cmd_stability(args) -> int:
    if args.random:
        ex = linstab.random_example(args.states, args.actions, args.gamma, args.seed, on_policy=args.onpolicy)
    else:
        if args.example not in linstab.EXAMPLES:
            print(f"unknown example {args.example!r}; options: {', '.join(sorted(linstab.EXAMPLES))}", file=sys.stderr)
            return 2
        ex = linstab.EXAMPLES[args.example]()
    report = linstab.stability_report(ex, args.horizon, args.dt)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text if not args.quiet else json.dumps({k: v for k, v in report.items() if k != "theta_norm_series"}))
    return 0


def cmd_probe(args) -> int:
    run_dir = Path(args.run)
    arrays, manifest = load_checkpoint(run_dir / "checkpoint")
    cfg = TrainConfig.from_dict(manifest["config"]["train"])
    params = params_from_arrays(arrays)
    env = make_env(cfg.env)
    obj = Objectives(cfg.net_config(env.obs_dim, env.act_dim), cfg.gamma)
    rng = np.random.default_rng(args.seed)
    val = load_validation(run_dir / "validation.csv")
    out: dict = {"run": str(run_dir)}
    if val:
        if len(val) > args.max_states:
            val = [val[i] for i in np.sort(rng.choice(len(val), args.max_states, replace=False))]
        rep = diagnostics.onpolicy_probe(obj, params, Batch.from_transitions(val), [t.sim_state for t in val], env)
        out.update(val_loss=rep.val_loss, onpolicy_loss=rep.onpolicy_loss, val_sq_err=rep.val_sq_err, onpolicy_sq_err=rep.onpolicy_sq_err)
        obs = Batch.from_transitions(val).obs
        out["adversarial_mean_abs_dq"] = diagnostics.adversarial_probe(obj, params, obs, args.epsilon, args.pgd_steps, args.step_size)
    q, mc = diagnostics.q_overestimation(obj, params, env, args.episodes, rng)
    out.update(q_mean=q, mc_return_mean=mc, overestimation=q - mc)
    print(json.dumps(out, indent=2))
    return 0


def read_episode_returns(metrics_path) -> list[float]:
    with open(metrics_path, newline="", encoding="utf-8") as fh:
        return [float(r["episode_return"]) for r in csv.DictReader(fh) if r["episode_return"]]


def cmd_regret(args) -> int:
    series = {}
    if args.returns:
        series["returns"] = [float(v) for v in args.returns.split(",")]
    for run in args.run or []:
        series[run] = read_episode_returns(Path(run) / "metrics.csv")
    if not series or any(not s for s in series.values()):
        print("need at least one non-empty return series", file=sys.stderr)
        return 2
    r_star = args.r_star if args.r_star is not None else max(max(s) for s in series.values())
    out = {"r_star": r_star, "regret": {k: diagnostics.average_regret(s, r_star) for k, s in series.items()}}
    print(json.dumps(out, indent=2))
    return 0


# --------------------------------------------------------------------------
# sweeps


def load_grid(path) -> tuple[dict, list[dict]]:
    """Grid JSON -> (base fields, list of cells).

    Accepted forms: {"base": {...}, "grid": {field: [values]}} expands to the
    Cartesian product; {"base": {...}, "cells": [{...}, ...]} lists cells
    explicitly.  A flat object is read as a grid over its list-valued entries.
    """
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "cells" in doc:
        cells = doc["cells"]
        if not isinstance(cells, list) or not cells or not all(isinstance(c, dict) for c in cells):
            raise ValueError("'cells' must be a non-empty list of objects")
        return dict(doc.get("base", {})), [dict(c) for c in cells]
    if "grid" in doc:
        base, grid = dict(doc.get("base", {})), dict(doc["grid"])
    else:
        base = {k: v for k, v in doc.items() if not isinstance(v, list)}
        grid = {k: v for k, v in doc.items() if isinstance(v, list)}
    for k, v in grid.items():
        if not isinstance(v, list) or not v:
            raise ValueError(f"grid entry {k!r} must be a non-empty list")
    keys = list(grid)
    return base, [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def cell_name(cell: dict) -> str:
    if not cell:
        return "cell"
    return "_".join(f"{k}{v:g}" if isinstance(v, float) else f"{k}{v}" for k, v in cell.items())


def expand_grid(base: dict, cells: list[dict], seeds) -> list[tuple[str, TrainConfig]]:
    """One (cell name, config) per cell and seed, seeds innermost."""
    jobs = []
    for cell in cells:
        for seed in seeds:
            d = {**base, **cell, "seed": seed}
            d["name"] = f"{base.get('name', 'sweep')}/{cell_name(cell)}/s{seed}"
            jobs.append((cell_name(cell), TrainConfig.from_dict(d)))
    return jobs


def _sweep_job(config: TrainConfig, runs_dir) -> tuple[str, str | None]:
    try:
        run_one(config, runs_dir)
        return config.run_name(), None
    except Exception as exc:  # noqa: BLE001 - recorded per cell
        return config.run_name(), repr(exc)


def aggregate(cells: dict[str, list[Path]], final_episodes: int = 5, r_star: float | None = None, n_resamples: int = 10000) -> list[dict]:
    """Per-cell mean and bootstrap CI of final return and regret, from metrics files only.

    ``r_star`` defaults to the best episode return seen anywhere in the sweep.
    """
    returns = {cell: [read_episode_returns(d / "metrics.csv") for d in dirs] for cell, dirs in cells.items()}
    if r_star is None:
        r_star = max((max(s) for runs in returns.values() for s in runs if s), default=0.0)
    rows = []
    for cell, runs in returns.items():
        runs = [s for s in runs if s]
        if not runs:
            continue
        finals = [float(np.mean(s[-final_episodes:])) for s in runs]
        regrets = [diagnostics.average_regret(s, r_star) for s in runs]
        fm, flo, fhi = diagnostics.bootstrap_ci(finals, n_resamples)
        rm, rlo, rhi = diagnostics.bootstrap_ci(regrets, n_resamples)
        rows.append({
            "cell": cell, "n_seeds": len(runs),
            "final_return_mean": fm, "final_return_lo": flo, "final_return_hi": fhi,
            "regret_mean": rm, "regret_lo": rlo, "regret_hi": rhi, "r_star": r_star,
        })
    return rows


def write_table(path, rows: list[dict]) -> None:
    cols = ["cell", "n_seeds", "final_return_mean", "final_return_lo", "final_return_hi", "regret_mean", "regret_lo", "regret_hi", "r_star"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([fmt(r[c]) if c != "cell" else r[c] for c in cols])


def cmd_sweep(args) -> int:
    base, cells = load_grid(args.grid)
    if args.preset:
        base.setdefault("preset", args.preset)
    seeds = [int(s) for s in args.seeds.split(",")] if "," in args.seeds else list(range(int(args.seeds)))
    jobs = expand_grid(base, cells, seeds)
    root = runs_root(args.runs_dir)
    failures = {}
    todo = [cfg for _, cfg in jobs if not (args.resume and (root / cfg.run_name() / "summary.json").exists())]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            results = list(ex.map(_sweep_job, todo, [args.runs_dir] * len(todo)))
    else:
        results = [_sweep_job(cfg, args.runs_dir) for cfg in todo]
    failures = {name: err for name, err in results if err}
    by_cell: dict[str, list[Path]] = {}
    for cell, cfg in jobs:
        if cfg.run_name() not in failures:
            by_cell.setdefault(cell, []).append(root / cfg.run_name())
    final_eps = jobs[0][1].final_episodes if jobs else 5
    rows = aggregate(by_cell, final_eps)
    out = Path(args.out) if args.out else root / base.get("name", "sweep") / "table.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(out, rows)
    if failures:
        (out.parent / "failures.json").write_text(json.dumps(failures, indent=2), encoding="utf-8")
    print(json.dumps({"runs": len(jobs), "cells": len(rows), "failed": sorted(failures), "table": str(out)}, indent=2))
    return 1 if failures else 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="madtd", description="Model-augmented TD training and diagnostics.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job")
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stability", help="linear TD stability analysis")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--example", help=f"bundled example: {', '.join(sorted(linstab.EXAMPLES))}")
    g.add_argument("--random", action="store_true", help="seeded random tabular MDP")
    p.add_argument("--states", type=positive_int, default=5)
    p.add_argument("--actions", type=positive_int, default=2)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--onpolicy", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=float, default=100.0)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true", help="omit the theta norm series from stdout")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("probe", help="diagnostic probes on a finished run")
    p.add_argument("run", help="run directory")
    p.add_argument("--episodes", type=positive_int, default=2)
    p.add_argument("--max-states", type=positive_int, default=256)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--pgd-steps", type=nonneg_int, default=10)
    p.add_argument("--step-size", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("sweep", help="run a config grid over seeds and aggregate")
    p.add_argument("--grid", required=True, help="grid JSON file")
    p.add_argument("--seeds", default="5", help="count, or comma-separated list")
    p.add_argument("--jobs", type=positive_int, default=1)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--resume", action="store_true", help="skip runs that already have a summary")
    p.add_argument("--out", help="aggregate table CSV")
    p.add_argument("--runs-dir")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("regret", help="average regret of return series")
    p.add_argument("--returns", help="comma-separated episode returns")
    p.add_argument("--run", action="append", help="run directory (repeatable)")
    p.add_argument("--r-star", type=float)
    p.set_defaults(func=cmd_regret)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        parser.error(str(exc))
    return 2


if __name__ == "__main__":
    sys.exit(main())
