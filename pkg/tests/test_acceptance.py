"""Acceptance suite: one test, and one printed pass/fail line, per criterion.

Criteria 6, 7, 8 and 10 read the desk-scale sweep stored under
``results/acceptance`` (override with MADTD_ACCEPTANCE_RUNS).  Runs missing
from there are trained first, which takes hours on one core.
"""
import csv
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from fdcheck import central_diff
from madtd import diagnostics, linstab
from madtd.cli import cell_name, expand_grid, load_grid, main, read_episode_returns
from madtd.envs import random_mdp
from madtd.nets import BinGeometry, NetConfig, Networks, hlgauss_decode, hlgauss_encode, init_agent
from madtd.planner import MpcConfig, cem, plan
from madtd.trainer import PRESETS, TrainConfig, TrainState, env_step, select_action, train
from test_losses import random_setup

ROOT = Path(__file__).resolve().parents[1]
GRID = ROOT / "sweeps" / "acceptance.json"
RUNS = Path(os.environ.get("MADTD_ACCEPTANCE_RUNS", ROOT / "results"))

UTD1_A0 = {"utd": 1, "alpha": 0.0}
UTD1_A05 = {"utd": 1, "alpha": 0.05}
UTD8_A0 = {"utd": 8, "alpha": 0.0}
UTD8_A05 = {"utd": 8, "alpha": 0.05}
UTD8_RAND = {"utd": 8, "alpha": 0.05, "action_source": "uniform_random"}


# -- 1 ----------------------------------------------------------------------------


def test_criterion_1_onpolicy_key_matrix(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_eig, worst_id, all_chol = math.inf, 0.0, True
    for _ in range(1000):
        X, A = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        gamma = float(rng.choice([0.5, 0.9, 0.99]))
        mdp = random_mdp(X, A, gamma, seed=rng)
        pi = linstab.random_policy(X, A, rng)
        occ = linstab.discounted_occupancy(mdp, pi)
        M = linstab.key_matrix([occ], mdp, pi)
        worst_eig = min(worst_eig, linstab.min_sym_eig(M))
        # second route: Cholesky of the symmetric part
        try:
            np.linalg.cholesky(0.5 * (M + M.T))
        except np.linalg.LinAlgError:
            all_chol = False
        # occupancy from the power series, independent of the linear solve
        n_terms = int(math.ceil(math.log(1e-16) / math.log(gamma)))
        mu = linstab.truncated_occupancy(mdp, pi, n_terms)
        lhs = mu @ (np.eye(X * A) - gamma * mdp.P @ pi)
        worst_id = max(worst_id, float(np.max(np.abs(lhs - (1 - gamma) * mdp.rho @ pi))))
    dt = time.perf_counter() - t0
    ok = worst_eig > 0 and all_chol and worst_id <= 1e-10 and dt < 30
    criterion(1, ok, f"min eig {worst_eig:.3g}, identity err {worst_id:.2g}, {dt:.1f}s")
    assert ok


# -- 2 ----------------------------------------------------------------------------


def test_criterion_2_key_matrix_decomposition(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst, zero_ok = 0.0, True
    for _ in range(100):
        X, A = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        mdp = random_mdp(X, A, float(rng.choice([0.5, 0.9, 0.99])), seed=rng)
        k = int(rng.integers(1, 5))
        pis = [linstab.random_policy(X, A, rng) for _ in range(k)]
        target = linstab.random_policy(X, A, rng)
        w = rng.dirichlet(np.ones(k))
        occ = [linstab.discounted_occupancy(mdp, p) for p in pis]
        on, res = linstab.decompose_key_matrix(occ, mdp, pis, target, w)
        worst = max(worst, float(np.max(np.abs(on + res - linstab.key_matrix(occ, mdp, target, w)))))
        _, res_same = linstab.decompose_key_matrix(occ[:1], mdp, pis[:1], pis[0])
        zero_ok &= bool(np.all(res_same == 0.0))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and zero_ok and dt < 10
    criterion(2, ok, f"max |key - (on + residual)| {worst:.2g}, residual zero on-policy: {zero_ok}, {dt:.2f}s")
    assert ok


# -- 3 ----------------------------------------------------------------------------


def test_criterion_3_divergence_witness(criterion):
    rep = linstab.stability_report(linstab.EXAMPLES["divergent2state"]())
    ex = linstab.EXAMPLES["onpolicy"]()
    occ = ex.occupancies()
    flow = linstab.gradient_flow(ex.mdp, occ, ex.target_pi, ex.Phi, ex.theta0)
    # direct linear solve of Phi D (I - gamma P Pi) Phi^T theta = Phi D R
    D = occ[0].D
    K = ex.Phi @ D @ (np.eye(ex.mdp.num_pairs) - ex.mdp.gamma * ex.mdp.P @ ex.target_pi) @ ex.Phi.T
    star = np.linalg.solve(K, ex.Phi @ D @ ex.mdp.R)
    err = float(np.max(np.abs(flow.theta - star)))
    ok = rep["final_theta_norm"] > 1e6 and rep["min_eig_key"] < 0 and not flow.diverged and err <= 1e-6
    criterion(3, ok, f"off-policy |theta| {rep['final_theta_norm']:.3g}, min eig {rep['min_eig_key']:.3g}; on-policy err {err:.2g}")
    assert ok


# -- 4 ----------------------------------------------------------------------------


def _worst_rel_err(params, grads, f, groups):
    worst = 0.0
    for key, g in grads.items():
        group, _, name = key.partition(".")
        if group not in groups:
            continue
        num = central_diff(f, getattr(params, group)[name])
        worst = max(worst, float(np.max(np.abs(g - num)) / max(np.max(np.abs(g)), np.max(np.abs(num)), 1e-6)))
    return worst


def test_criterion_4_gradients(criterion):
    worst = {}
    for seed in range(20):
        params, batch, obj = random_setup(1000 + seed, model_rows=2)
        targets = obj.td_target(params, batch)
        _, grads = obj.critic_loss(params, batch, targets)
        z0 = obj.nets.encode(params, batch.obs)

        def critic():
            z = obj.nets.encode(params, batch.obs)
            z[batch.is_model] = z0[batch.is_model]
            return obj.critic_loss(params, batch, targets, train_encoder=False, z=z, grad=False)[0]

        worst["critic"] = max(worst.get("critic", 0.0), _worst_rel_err(params, grads, critic, {"encoder", "critic_1", "critic_2"}))

        params, batch, obj = random_setup(2000 + seed)
        inputs = obj.model_inputs(params, batch)
        for part in ("reward", "forward", "value"):
            _, grads = obj.model_loss(params, batch, part=part, inputs=inputs)
            f = lambda part=part: getattr(obj.model_loss(params, batch, inputs=inputs)[0], part)  # noqa: E731
            worst[part] = max(worst.get(part, 0.0), _worst_rel_err(params, grads, f, {"encoder", "latent_model"}))

        params, batch, obj = random_setup(3000 + seed)
        z = obj.nets.encode(params, batch.obs)
        _, grads = obj.actor_loss(params, z=z)
        worst["actor"] = max(worst.get("actor", 0.0), _worst_rel_err(params, grads, lambda: obj.actor_loss(params, z=z)[0], {"actor"}))
    ok = all(v <= 1e-4 for v in worst.values())
    criterion(4, ok, "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


# -- 5 ----------------------------------------------------------------------------


def test_criterion_5_representation(criterion):
    cfg = NetConfig(obs_dim=3, act_dim=1, hidden=32, latent=16)
    rng = np.random.default_rng(5)
    params, nets = init_agent(cfg, rng), Networks(cfg)
    z = nets.encode(params, rng.normal(scale=5, size=(100_000, 3)))
    simnorm_err = float(np.max(np.abs(z.reshape(len(z), -1, 8).sum(-1) - 1.0)))

    rt = {}
    for n, vmax in ((101, 100.0), (51, 100.0)):
        b = BinGeometry(-vmax, vmax, n)
        v = np.linspace(-0.9 * vmax, 0.9 * vmax, 20001)
        rt[n] = float(np.max(np.abs(hlgauss_decode(hlgauss_encode(v, b), b) - v)) / b.width)

    zero = True
    for seed in range(20):
        r = np.random.default_rng(seed)
        p = init_agent(cfg, r)
        zz = nets.encode(p, r.normal(scale=3, size=(256, 3)))
        a = r.uniform(-1, 1, size=(256, 1))
        zero &= all(np.all(nets.q_value(getattr(p, c), zz, a) == 0.0) for c in ("critic_1", "critic_2", "target_critic_1", "target_critic_2"))
    ok = simnorm_err <= 1e-8 and max(rt.values()) <= 0.05 and zero
    criterion(5, ok, f"simnorm err {simnorm_err:.1e}, round trip/width {max(rt.values()):.2e}, zero critic exact: {zero}")
    assert ok


# -- sweep ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def sweep():
    base, cells = load_grid(GRID)
    jobs = expand_grid(base, cells, range(5))
    missing = [cfg for _, cfg in jobs if not (RUNS / cfg.run_name() / "summary.json").exists()]
    if missing:
        main(["sweep", "--grid", str(GRID), "--seeds", "5", "--runs-dir", str(RUNS), "--resume"])
    runs: dict[str, list[Path]] = {}
    for name, cfg in jobs:
        runs.setdefault(name, []).append(RUNS / cfg.run_name())
    return base, runs


def _finals(runs, cell, k=5):
    return np.array([np.mean(read_episode_returns(d / "metrics.csv")[-k:]) for d in runs[cell_name(cell)]])


def _probes(runs, cell):
    """{column: (seeds, probes) array} from every run of a cell."""
    tables = []
    for d in runs[cell_name(cell)]:
        with open(d / "probes.csv", newline="") as fh:
            tables.append(list(csv.DictReader(fh)))
    cols = tables[0][0].keys()
    return {c: np.array([[float(r[c]) if r[c] else np.nan for r in t] for t in tables]) for c in cols}


def _early(p, horizon):
    return p["env_step"][0] <= horizon / 3


def test_criterion_6_onpolicy_gap_and_overestimation(sweep, criterion):
    base, runs = sweep
    steps = TrainConfig.from_dict(base).steps_total
    p1, p8, p8m = _probes(runs, UTD1_A0), _probes(runs, UTD8_A0), _probes(runs, UTD8_A05)

    def gap(p, on="onpolicy_loss", val="val_loss"):
        e = _early(p, steps)
        return np.mean(p[on][:, e]) / np.mean(p[val][:, e]) - 1.0

    g0, g05 = gap(p8), gap(p8m)
    # reported alongside, not part of the check: the same gap on decoded-value squared error
    sq0, sq05 = gap(p8, "onpolicy_sq_err", "val_sq_err"), gap(p8m, "onpolicy_sq_err", "val_sq_err")
    over1 = np.mean(p1["overestimation"][:, _early(p1, steps)])
    over8 = np.mean(p8["overestimation"][:, _early(p8, steps)])
    peak0 = np.max(np.mean(p8["overestimation"], axis=0))
    peak05 = np.max(np.mean(p8m["overestimation"], axis=0))
    wall = sum(json.loads((d / "summary.json").read_text())["wall_clock_s"] for ds in runs.values() for d in ds)
    checks = {
        "gap>=20%": g0 >= 0.2,
        "early over UTD8>UTD1": over8 > over1,
        "gap shrinks>=50%": g05 <= 0.5 * g0,
        "peak over lower": peak05 < peak0,
    }
    detail = (
        f"gap a0 {g0:+.3f} a.05 {g05:+.3f} (sq-err gap {sq0:+.1f} / {sq05:+.1f}); early over utd1 {over1:.2f} utd8 {over8:.2f}; "
        f"peak over a0 {peak0:.2f} a.05 {peak05:.2f}; failed {[k for k, v in checks.items() if not v]}; sweep wall {wall / 60:.0f} min"
    )
    ok = all(checks.values())
    criterion(6, ok, detail)
    assert ok


def test_criterion_7_model_data_prevents_collapse(sweep, criterion):
    _, runs = sweep
    f8m, f8, f1m = _finals(runs, UTD8_A05).mean(), _finals(runs, UTD8_A0).mean(), _finals(runs, UTD1_A05).mean()
    ok = f8m >= f8 and f8m >= 0.95 * f1m
    criterion(7, ok, f"final return utd8 a.05 {f8m:.1f}, utd8 a0 {f8:.1f}, utd1 a.05 {f1m:.1f}")
    assert ok


def test_criterion_8_random_action_ablation(sweep, criterion):
    _, runs = sweep
    rand, a0, a05 = _finals(runs, UTD8_RAND), _finals(runs, UTD8_A0), _finals(runs, UTD8_A05)
    # within noise: difference of means inside two standard errors
    se = math.sqrt(rand.var(ddof=1) / rand.size + a0.var(ddof=1) / a0.size)
    near = abs(rand.mean() - a0.mean()) <= 2 * se
    ok = near and rand.mean() < a05.mean()
    criterion(8, ok, f"random {rand.mean():.1f}, a0 {a0.mean():.1f} (2se {2 * se:.1f}), a.05 {a05.mean():.1f}")
    assert ok


# -- 9 ----------------------------------------------------------------------------


def test_criterion_9_planner(criterion):
    errs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        c = rng.uniform(-0.9, 0.9)
        a = cem(lambda x, c=c: -((x[:, 0] - c) ** 2), rng.uniform(-1, 1, size=1), MpcConfig(enabled=True), rng)
        errs.append(abs(a[0] - c))
    cfg = NetConfig(obs_dim=3, act_dim=1, hidden=16, latent=8, num_bins=21)
    rng = np.random.default_rng(0)
    nets, params = Networks(cfg), init_agent(cfg, rng)
    bitwise = True
    for _ in range(100):
        z = nets.encode(params, rng.normal(size=3))
        bitwise &= np.array_equal(plan(nets, params, z, MpcConfig(enabled=False), rng), nets.actor(params, z))
    # and inside the trainer's action selection
    state = TrainState.create(TrainConfig(**{**PRESETS["tiny"], "init_random_steps": 0}))
    for _ in range(20):
        z = state.nets.encode(state.params, state.env.observe(state.env_state))
        bitwise &= np.array_equal(select_action(state), state.nets.actor(state.params, z))
        env_step(state)
    ok = max(errs) <= 0.02 and bitwise
    criterion(9, ok, f"max CEM argmax err {max(errs):.2e} over 20 seeds, MPC-off bitwise: {bitwise}")
    assert ok


# -- 10 ---------------------------------------------------------------------------


def test_criterion_10_regret(sweep, criterion):
    hand = (
        diagnostics.average_regret([3.0, 3.0, 3.0], 3.0) == 0.0
        and diagnostics.average_regret([0.0, 10.0], 10.0) == 5.0
        and diagnostics.average_regret([10.0, 0.0], 10.0) == diagnostics.average_regret([0.0, 10.0], 10.0)
    )
    _, runs = sweep
    series = {cell: [read_episode_returns(d / "metrics.csv") for d in dirs] for cell, dirs in runs.items()}
    r_star = max(max(s) for ss in series.values() for s in ss)
    reset_cell = next(c for c in series if "reset_interval" in c)

    def regret(cell):
        return float(np.mean([diagnostics.average_regret(s, r_star) for s in series[cell]]))

    plain, reset = regret(cell_name(UTD8_A05)), regret(reset_cell)
    ok = hand and plain <= reset
    criterion(10, ok, f"hand cases exact: {hand}; regret a.05 {plain:.1f} vs reset {reset:.1f} (r* {r_star:.1f})")
    assert ok


# -- 11 ---------------------------------------------------------------------------


def test_criterion_11_determinism(tmp_path, criterion):
    configs = [
        {"utd": 2, "alpha": 0.25},
        {"utd": 2, "alpha": 0.25, "action_source": "uniform_random", "reset_interval": 150},
        {"utd": 1, "alpha": 0.0, "mpc": True, "mpc_samples": 32, "mpc_top_k": 4, "mpc_iterations": 2},
    ]
    same = []
    for i, kw in enumerate(configs):
        cfg = TrainConfig(**{**PRESETS["tiny"], **kw, "seed": 3, "name": f"d{i}"})
        train(cfg, runs_dir=tmp_path / "a")
        train(cfg, runs_dir=tmp_path / "b")
        same.append((tmp_path / "a" / f"d{i}" / "metrics.csv").read_bytes() == (tmp_path / "b" / f"d{i}" / "metrics.csv").read_bytes())
    ok = all(same)
    criterion(11, ok, f"byte-identical metrics for {sum(same)}/{len(same)} repeated configs")
    assert ok
