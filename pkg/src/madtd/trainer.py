"""Training loop: replay, model-data batch mixing, UTD scheduling and resets."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diagnostics
from .envs import EnvState, Transition, make_env
from .losses import Batch, LossReport, Objectives, split_grads
from .nets import CRITICS, TARGETS, AgentParams, NetConfig, init_agent, netconfig_dict, params_to_arrays, reinit_agent_heads, save_checkpoint
from .numkernel import AdamState, NonFiniteError, adam_step, soft_update
from .planner import MpcConfig, plan

log = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "env_step",
    "episode_return",
    "critic_loss",
    "model_fwd",
    "model_rew",
    "model_val",
    "actor_loss",
    "q_mean",
    "target_q_mean",
    "val_loss",
    "onpolicy_loss",
    "q_overest",
)
PROBE_COLUMNS = (
    "env_step",
    "train_loss",
    "val_loss",
    "onpolicy_loss",
    "q_mean",
    "mc_return_mean",
    "overestimation",
    "train_sq_err",
    "val_sq_err",
    "onpolicy_sq_err",
)
ACTION_SOURCES = ("policy", "uniform_random")
DESK_RESET_INTERVAL = 10000

# Smaller networks and batches for runs that have to finish on one CPU core.
PRESETS = {
    "default": {},
    "desk": {"hidden": 32, "latent": 16, "num_bins": 51, "batch_size": 64},
    "tiny": {"hidden": 16, "latent": 8, "num_bins": 21, "batch_size": 16, "steps_total": 300, "init_random_steps": 100, "log_interval": 50, "probe_interval": 100, "probe_episodes": 1, "probe_max_states": 16},
}


class TrainingAborted(RuntimeError):
    """A loss or gradient went non-finite; the state was dumped to ``dump_dir``."""

    def __init__(self, message: str, dump_dir: Path | None = None):
        super().__init__(message)
        self.dump_dir = dump_dir


@dataclass
class TrainConfig:
    env: str = "pendulum_swingup"
    utd: int = 8
    alpha: float = 0.05
    batch_size: int = 256
    steps_total: int = 30000
    init_random_steps: int = 1000
    reset_interval: int = 0
    action_source: str = "policy"
    seed: int = 0
    lr_rl: float = 3e-4
    lr_model: float = 3e-4
    lr_encoder: float = 1e-4
    tau: float = 0.995
    gamma: float = 0.99
    clip_norm: float = 10.0
    hidden: int = 128
    latent: int = 64
    num_bins: int = 101
    vmax: float = 100.0
    p_val: float = 0.05
    buffer_capacity: int = 0  # 0 = steps_total
    log_interval: int = 100
    probe_interval: int = 500
    probe_max_states: int = 256
    probe_episodes: int = 2
    final_episodes: int = 5
    r_star: float | None = None
    mpc: bool = False
    mpc_samples: int = 512
    mpc_iterations: int = 6
    mpc_top_k: int = 64
    mpc_temperature: float = 0.5
    adv_epsilon: float = 0.1
    adv_steps: int = 10
    adv_step_size: float = 0.01
    name: str = ""

    def __post_init__(self):
        if self.action_source == "random":
            self.action_source = "uniform_random"
        ints = {"utd": 1, "batch_size": 1, "steps_total": 0, "init_random_steps": 0, "reset_interval": 0, "buffer_capacity": 0, "log_interval": 1, "probe_interval": 0, "probe_max_states": 1, "probe_episodes": 0, "final_episodes": 1, "hidden": 1, "latent": 1, "num_bins": 2}
        for name, lo in ints.items():
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < lo:
                raise ValueError(f"{name} must be an integer >= {lo}, got {v!r}")
            setattr(self, name, int(v))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.action_source not in ACTION_SOURCES:
            raise ValueError(f"action_source must be one of {ACTION_SOURCES}, got {self.action_source!r}")
        if not 0.0 <= self.p_val < 1.0:
            raise ValueError(f"p_val must lie in [0, 1), got {self.p_val}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        for name in ("lr_rl", "lr_model", "lr_encoder", "vmax"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.probe_interval and self.probe_interval % self.log_interval:
            raise ValueError("probe_interval must be a multiple of log_interval")
        if self.latent % 8:
            raise ValueError("latent must be a multiple of the SimNorm group size 8")
        self.mpc_config()

    @property
    def replacements(self) -> int:
        return model_rows(self.alpha, self.batch_size)

    def net_config(self, obs_dim: int, act_dim: int) -> NetConfig:
        return NetConfig(obs_dim, act_dim, hidden=self.hidden, latent=self.latent, num_bins=self.num_bins, vmax=self.vmax)

    def mpc_config(self) -> MpcConfig:
        return MpcConfig(self.mpc, self.mpc_samples, self.mpc_iterations, self.mpc_top_k, self.mpc_temperature)

    def run_name(self) -> str:
        if self.name:
            return self.name
        src = "" if self.action_source == "policy" else "_randact"
        rst = f"_reset{self.reset_interval}" if self.reset_interval else ""
        return f"{self.env}_utd{self.utd}_a{self.alpha:g}{src}{rst}_s{self.seed}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"preset"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        base = dict(PRESETS[d.pop("preset", "default")])
        base.update(d)
        return cls(**base)


def model_rows(alpha: float, batch_size: int) -> int:
    """Number of rows replaced by model data: round(alpha * B), ties to even."""
    return int(round(alpha * batch_size))


# --------------------------------------------------------------------------
# replay


class ReplayBuffer:
    """Ring buffer of real transitions plus a held-out validation set.

    Each added transition goes to the validation set with probability
    ``p_val`` (decided once, on insertion) and to the replay ring otherwise.
    Validation entries keep their simulator state so probes can reset there.
    """

    def __init__(self, capacity: int, obs_dim: int, act_dim: int, p_val: float = 0.05):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.p_val = p_val
        self.obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros((capacity, act_dim))
        self.reward = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.ptr = 0
        self.val: list[Transition] = []

    def __len__(self) -> int:
        return self.size

    def add(self, tr: Transition, rng) -> bool:
        """Store ``tr``; returns True if it went to the validation set."""
        if tr.source != "real":
            raise ValueError("the replay buffer stores real transitions only")
        if rng.random() < self.p_val:
            self.val.append(tr)
            return True
        i = self.ptr
        self.obs[i] = tr.state
        self.action[i] = np.ravel(tr.action)
        self.reward[i] = tr.reward
        self.next_obs[i] = tr.next_state
        self.terminal[i] = tr.terminal
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return False

    def sample(self, batch_size: int, rng) -> Batch:
        """Uniform with replacement over the current contents."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return self.get(idx)

    def get(self, idx) -> Batch:
        idx = np.asarray(idx)
        return Batch(self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx], self.terminal[idx], indices=idx)

    def validation(self, max_states: int | None = None, rng=None) -> tuple[Batch | None, list]:
        """(batch, simulator states) for at most ``max_states`` validation transitions."""
        items = self.val
        if not items:
            return None, []
        if max_states is not None and len(items) > max_states:
            pick = np.sort(rng.choice(len(items), size=max_states, replace=False))
            items = [items[i] for i in pick]
        return Batch.from_transitions(items), [t.sim_state for t in items]


# --------------------------------------------------------------------------
# batch mixing


def mix_batch(batch: Batch, params: AgentParams, alpha: float, action_source: str, nets, rng) -> Batch:
    """Replace round(alpha * B) rows, chosen without replacement, by model transitions.

    Replaced rows keep their observation; the action becomes the actor's
    (or a uniform random one for ``action_source='uniform_random'``) and the
    reward and next latent come from the latent model.  Their ``next_obs`` is
    NaN since only the predicted latent exists.
    """
    if action_source not in ACTION_SOURCES:
        raise ValueError(f"unknown action source {action_source!r}")
    B = len(batch)
    m = model_rows(alpha, B)
    out = batch.copy()
    if out.next_latent is None:
        out.next_latent = np.full((B, nets.cfg.latent), np.nan)
    if m == 0:
        return out
    rows = np.sort(rng.choice(B, size=m, replace=False))
    z = nets.encode(params, batch.obs[rows])
    if action_source == "policy":
        a = nets.actor(params, z)
    else:
        a = rng.uniform(-1.0, 1.0, size=(m, batch.action.shape[1]))
    z_next, r_hat = nets.model_step(params, z, a)
    out.action[rows] = a
    out.reward[rows] = r_hat
    out.next_obs[rows] = np.nan
    out.terminal[rows] = False
    out.is_model[rows] = True
    out.next_latent[rows] = z_next
    return out


# --------------------------------------------------------------------------
# training state


@dataclass
class Streams:
    """Independent random streams derived from one seed."""

    init: np.random.Generator
    env: np.random.Generator
    explore: np.random.Generator
    replay: np.random.Generator
    val: np.random.Generator
    mix: np.random.Generator
    reset: np.random.Generator
    planner: np.random.Generator
    probe: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> Streams:
        names = [f.name for f in fields(cls)]
        children = np.random.SeedSequence(seed).spawn(len(names))
        return cls(**{n: np.random.default_rng(s) for n, s in zip(names, children)})


def _adam(store, lr) -> AdamState:
    return AdamState.for_params(store, lr)


@dataclass
class TrainState:
    config: TrainConfig
    env: object
    objectives: Objectives
    params: AgentParams
    replay: ReplayBuffer
    streams: Streams
    opt: dict = field(default_factory=dict)
    step: int = 0
    env_state: EnvState | None = None
    episode_return: float = 0.0
    episode_returns: list = field(default_factory=list)
    num_updates: int = 0
    num_model_updates: int = 0
    num_resets: int = 0
    # replay indices of every critic batch in the most recent round
    last_indices: list = field(default_factory=list)

    @property
    def nets(self):
        return self.objectives.nets

    @classmethod
    def create(cls, config: TrainConfig) -> TrainState:
        env = make_env(config.env)
        streams = Streams.from_seed(config.seed)
        cfg = config.net_config(env.obs_dim, env.act_dim)
        params = init_agent(cfg, streams.init)
        capacity = config.buffer_capacity or max(config.steps_total, 1)
        st = cls(config, env, Objectives(cfg, config.gamma), params, ReplayBuffer(capacity, env.obs_dim, env.act_dim, config.p_val), streams)
        st.opt = {
            "encoder": _adam(params.encoder, config.lr_encoder),
            "latent_model": _adam(params.latent_model, config.lr_model),
            "critic": _adam(params.flat(*CRITICS), config.lr_rl),
            "actor": _adam(params.actor, config.lr_rl),
        }
        st.env_state = env.reset(streams.env)
        return st


def _finite(name: str, value: float) -> float:
    if not math.isfinite(value):
        raise NonFiniteError(f"{name} is {value}")
    return value


def _critic_step(state: TrainState, grads: dict) -> None:
    """Adam on both critics jointly (one optimizer, one clipping norm)."""
    # flat() hands out the stored arrays themselves, so the update is in place
    adam_step(state.opt["critic"], state.params.flat(*CRITICS), grads, state.config.clip_norm)


def update_round(state: TrainState) -> list[LossReport]:
    """One model/encoder update, then ``utd`` critic/actor/target updates.

    Returns one LossReport per critic update (the model losses are attached
    to the first).  Skipped, returning [], while the replay holds fewer than
    ``batch_size`` transitions.
    """
    c = state.config
    if len(state.replay) < c.batch_size:
        return []
    obj, nets, p, rng = state.objectives, state.nets, state.params, state.streams.replay

    real = state.replay.sample(c.batch_size, rng)
    targets = obj.td_target(p, real)
    parts, grads = obj.model_loss(p, real, targets)
    _finite("model loss", parts.total)
    g = split_grads(grads)
    adam_step(state.opt["encoder"], p.encoder, g["encoder"], c.clip_norm)
    adam_step(state.opt["latent_model"], p.latent_model, g["latent_model"], c.clip_norm)
    state.num_model_updates += 1

    reports = []
    state.last_indices = []
    for i in range(c.utd):
        batch = state.replay.sample(c.batch_size, rng)
        state.last_indices.append(batch.indices.copy())
        mixed = mix_batch(batch, p, c.alpha, c.action_source, nets, state.streams.mix)
        z = nets.encode(p, mixed.obs)
        targets = obj.td_target(p, mixed)
        critic_loss, cgrads = obj.critic_loss(p, mixed, targets, train_encoder=False, z=z)
        _finite("critic loss", critic_loss)
        if any(not k.startswith("critic_") for k in cgrads):
            raise AssertionError(f"critic update touched {sorted(cgrads)}")
        _critic_step(state, cgrads)
        actor_loss, agrads = obj.actor_loss(p, z=z)
        _finite("actor loss", actor_loss)
        adam_step(state.opt["actor"], p.actor, split_grads(agrads)["actor"], c.clip_norm)
        for online, target in zip(CRITICS, TARGETS):
            soft_update(getattr(p, target), getattr(p, online), c.tau)
        state.num_updates += 1
        q = nets.min_q(p, z, mixed.action)
        rep = LossReport(critic_loss=critic_loss, actor_loss=actor_loss, q_mean=float(q.mean()), target_q_mean=float(targets.value.mean()))
        if i == 0:
            rep.model_reward_loss, rep.model_forward_loss, rep.model_value_loss = parts.reward, parts.forward, parts.value
        reports.append(rep)
    return reports


def maybe_reset(state: TrainState, step: int) -> bool:
    """Reinitialise actor, critics, targets and their optimizers at multiples of reset_interval."""
    k = state.config.reset_interval
    if k <= 0 or step <= 0 or step % k:
        return False
    p = state.params
    reinit_agent_heads(p, state.objectives.cfg, state.streams.reset)
    state.opt["critic"] = _adam(p.flat(*CRITICS), state.config.lr_rl)
    state.opt["actor"] = _adam(p.actor, state.config.lr_rl)
    state.num_resets += 1
    return True


def select_action(state: TrainState) -> np.ndarray:
    env, c = state.env, state.config
    if state.step < c.init_random_steps:
        return state.streams.explore.uniform(-1.0, 1.0, size=env.act_dim)
    z = state.nets.encode(state.params, env.observe(state.env_state))
    return plan(state.nets, state.params, z, c.mpc_config(), state.streams.planner, c.gamma)


def env_step(state: TrainState) -> float | None:
    """Act once; returns the episode return if the episode just ended."""
    env = state.env
    s = state.env_state
    a = select_action(state)
    nxt, r, done = env.step(s, a)
    # episodes end only by the time limit, so the transition still bootstraps
    tr = Transition(env.observe(s), np.asarray(a, dtype=np.float64), float(r), env.observe(nxt), False, sim_state=s)
    state.replay.add(tr, state.streams.val)
    state.episode_return += r
    state.step += 1
    if done:
        ret = state.episode_return
        state.episode_returns.append(ret)
        state.episode_return = 0.0
        state.env_state = env.reset(state.streams.env)
        return ret
    state.env_state = nxt
    return None


# --------------------------------------------------------------------------
# probes and logging


def run_probes(state: TrainState) -> diagnostics.ProbeReport | None:
    c, rng = state.config, state.streams.probe
    val, sims = state.replay.validation(c.probe_max_states, rng)
    if val is None:
        return None
    train = state.replay.sample(c.batch_size, rng) if len(state.replay) else None
    rep = diagnostics.onpolicy_probe(state.objectives, state.params, val, sims, state.env, train, state.step)
    if c.probe_episodes:
        rep.q_mean, rep.mc_return_mean = diagnostics.q_overestimation(state.objectives, state.params, state.env, c.probe_episodes, rng)
    return rep


def fmt(v) -> str:
    """Locale-independent float formatting; blank for missing values."""
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else format(v, ".10g")


def _mean(reports, attr):
    vals = [getattr(r, attr) for r in reports if not math.isnan(getattr(r, attr))]
    return float(np.mean(vals)) if vals else None


def summarize_returns(returns, final_episodes: int, r_star: float | None) -> dict:
    returns = [float(r) for r in returns]
    if not returns:
        return {"final_return": None, "mean_return": None, "regret": None, "r_star": r_star, "episodes": 0}
    star = max(returns) if r_star is None else float(r_star)
    return {
        "final_return": float(np.mean(returns[-final_episodes:])),
        "mean_return": float(np.mean(returns)),
        "regret": diagnostics.average_regret(returns, star),
        "r_star": star,
        "episodes": len(returns),
    }


def save_validation(path, transitions: list[Transition]) -> None:
    """Validation transitions with their simulator states, one CSV row each."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["obs", "action", "reward", "next_obs", "sim_x", "sim_t"])
        for tr in transitions:
            # repr round-trips floats exactly
            vec = lambda a: " ".join(repr(float(v)) for v in np.ravel(a))  # noqa: E731
            w.writerow([vec(tr.state), vec(tr.action), repr(float(tr.reward)), vec(tr.next_state), vec(tr.sim_state.x), tr.sim_state.t])


def load_validation(path) -> list[Transition]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            vec = lambda s: np.array([float(v) for v in s.split()])  # noqa: E731
            out.append(Transition(vec(row["obs"]), vec(row["action"]), float(row["reward"]), vec(row["next_obs"]), False, sim_state=EnvState(vec(row["sim_x"]), int(row["sim_t"]))))
    return out


def _dump(state: TrainState, run_dir: Path, exc: Exception) -> Path:
    d = run_dir / "abort"
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "params", params_to_arrays(state.params), state.config.to_dict())
    info = {"step": state.step, "error": repr(exc), "episode_returns": state.episode_returns, "num_updates": state.num_updates}
    (d / "state.json").write_text(json.dumps(info, indent=2), encoding="utf-8")
    return d


def runs_root(root=None) -> Path:
    return Path(root if root is not None else os.environ.get("MADTD_RUNS_DIR", "runs"))


def train(config: TrainConfig, runs_dir=None, progress: bool = False) -> dict:
    """Run one training job and write ``metrics.csv``, ``probes.csv``,
    ``summary.json`` and a final checkpoint under ``<runs_dir>/<name>/``.

    Returns the summary dict.
    """
    t0 = time.time()
    run_dir = runs_root(runs_dir) / config.run_name()
    run_dir.mkdir(parents=True, exist_ok=True)
    state = TrainState.create(config)
    c = config
    if c.log_interval > state.env.horizon:
        raise ValueError("log_interval may not exceed the episode horizon")

    pending: list[LossReport] = []
    last_return = None
    with open(run_dir / "metrics.csv", "w", newline="", encoding="utf-8") as mf, open(run_dir / "probes.csv", "w", newline="", encoding="utf-8") as pf:
        mw = csv.writer(mf, lineterminator="\n")
        pw = csv.writer(pf, lineterminator="\n")
        mw.writerow(METRICS_COLUMNS)
        pw.writerow(PROBE_COLUMNS)
        try:
            while state.step < c.steps_total:
                ret = env_step(state)
                if ret is not None:
                    last_return = ret
                if maybe_reset(state, state.step):
                    log.info("step %d: reset actor and critics", state.step)
                if state.step >= c.init_random_steps:
                    pending.extend(update_round(state))
                if state.step % c.log_interval == 0:
                    probe = None
                    if c.probe_interval and state.step % c.probe_interval == 0:
                        probe = run_probes(state)
                        if probe is not None:
                            d = probe.as_dict()
                            pw.writerow([fmt(d[k]) for k in PROBE_COLUMNS])
                    row = [
                        state.step,
                        last_return,
                        _mean(pending, "critic_loss"),
                        _mean(pending, "model_forward_loss"),
                        _mean(pending, "model_reward_loss"),
                        _mean(pending, "model_value_loss"),
                        _mean(pending, "actor_loss"),
                        _mean(pending, "q_mean"),
                        _mean(pending, "target_q_mean"),
                        probe.val_loss if probe else None,
                        probe.onpolicy_loss if probe else None,
                        probe.overestimation if probe else None,
                    ]
                    mw.writerow([fmt(v) for v in row])
                    mf.flush()
                    pending, last_return = [], None
                    if progress:
                        log.info("step %d episodes %d last %s", state.step, len(state.episode_returns), state.episode_returns[-1:] or "-")
        except (NonFiniteError, FloatingPointError) as exc:
            dump = _dump(state, run_dir, exc)
            raise TrainingAborted(f"non-finite value at step {state.step}: {exc}", dump) from exc

    adv = None
    if len(state.replay) and c.adv_epsilon > 0:
        obs = state.replay.sample(min(len(state.replay), c.probe_max_states), state.streams.probe).obs
        adv = diagnostics.adversarial_probe(state.objectives, state.params, obs, c.adv_epsilon, c.adv_steps, c.adv_step_size)
    save_validation(run_dir / "validation.csv", state.replay.val)
    save_checkpoint(run_dir / "checkpoint", params_to_arrays(state.params), {"train": c.to_dict(), "net": netconfig_dict(state.objectives.cfg)})

    summary = summarize_returns(state.episode_returns, c.final_episodes, c.r_star)
    summary.update(
        run=c.run_name(),
        config=c.to_dict(),
        episode_returns=[float(r) for r in state.episode_returns],
        steps=state.step,
        num_updates=state.num_updates,
        num_model_updates=state.num_model_updates,
        num_resets=state.num_resets,
        validation_size=len(state.replay.val),
        adversarial={"epsilon": c.adv_epsilon, "steps": c.adv_steps, "step_size": c.adv_step_size, "mean_abs_dq": adv},
        mpc=asdict(c.mpc_config()),
        wall_clock_s=time.time() - t0,
    )
    tmp = run_dir / "summary.json.tmp"
    tmp.write_text(json.dumps(summary, indent=2), encoding="utf-8")
    os.replace(tmp, run_dir / "summary.json")
    return summary
