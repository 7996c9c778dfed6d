"""Measurement probes: on-policy generalisation gap, Q overestimation, regret, PGD smoothness."""
from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass

import numpy as np

from .losses import Batch, Objectives
from .nets import AgentParams, build_critic
from .numkernel import Tape


@dataclass
class ProbeReport:
    env_step: int
    train_loss: float
    val_loss: float
    onpolicy_loss: float
    q_mean: float = float("nan")
    mc_return_mean: float = float("nan")
    train_sq_err: float = float("nan")
    val_sq_err: float = float("nan")
    onpolicy_sq_err: float = float("nan")

    @property
    def overestimation(self) -> float:
        return self.q_mean - self.mc_return_mean

    def as_dict(self) -> dict:
        d = asdict(self)
        d["overestimation"] = self.overestimation
        return d


def critic_eval(objectives: Objectives, params: AgentParams, batch: Batch) -> tuple[float, float]:
    """(critic cross-entropy, squared error of decoded min-Q vs scalar target).

    Same tape as training, forward only.
    """
    targets = objectives.td_target(params, batch)
    z = objectives.nets.encode(params, batch.obs)
    loss, _ = objectives.critic_loss(params, batch, targets, train_encoder=False, z=z, grad=False)
    q = objectives.nets.min_q(params, z, batch.action)
    return float(loss), float(np.mean((q - targets.value) ** 2))


def onpolicy_batch(objectives: Objectives, params: AgentParams, env, val_batch: Batch, sim_states) -> Batch:
    """Ground-truth transitions taking the current policy's action at each validation state."""
    actions = objectives.nets.policy(params, val_batch.obs)
    next_obs, rewards, terms = [], [], []
    for s, a in zip(sim_states, actions):
        nxt, r, term = env.step(env.reset_to(s), a)
        next_obs.append(env.observe(nxt))
        rewards.append(r)
        terms.append(term)
    return Batch(val_batch.obs, actions, np.array(rewards), np.array(next_obs), np.array(terms))


def onpolicy_probe(objectives: Objectives, params: AgentParams, val_batch: Batch, sim_states, env, train_batch: Batch | None = None, env_step: int = 0) -> ProbeReport | None:
    """Critic loss on validation transitions and on their on-policy counterparts.

    Returns None when there are no validation states.
    """
    if val_batch is None or len(val_batch) == 0:
        return None
    val_loss, val_err = critic_eval(objectives, params, val_batch)
    on_loss, on_err = critic_eval(objectives, params, onpolicy_batch(objectives, params, env, val_batch, sim_states))
    train_loss, train_err = (float("nan"), float("nan"))
    if train_batch is not None and len(train_batch):
        train_loss, train_err = critic_eval(objectives, params, train_batch)
    return ProbeReport(env_step, train_loss, val_loss, on_loss, train_sq_err=train_err, val_sq_err=val_err, onpolicy_sq_err=on_err)


def q_overestimation(objectives: Objectives, params: AgentParams, env, n_episodes: int, rng, gamma: float | None = None) -> tuple[float, float]:
    """(mean decoded min-Q at start states, mean discounted Monte-Carlo return).

    Rolls the deterministic actor for full episodes.
    """
    gamma = objectives.gamma if gamma is None else gamma
    nets = objectives.nets
    qs, returns = [], []
    for _ in range(n_episodes):
        state = env.reset(rng)
        obs = env.observe(state)
        z = nets.encode(params, obs)
        qs.append(float(nets.min_q(params, z[None], nets.actor(params, z)[None])[0]))
        ret, disc, done = 0.0, 1.0, False
        while not done:
            state, r, done = env.step(state, nets.actor(params, nets.encode(params, env.observe(state))))
            ret += disc * r
            disc *= gamma
        returns.append(ret)
    return float(np.mean(qs)), float(np.mean(returns))


def average_regret(returns: Sequence[float], r_star: float) -> float:
    """(1/T) sum_t (r_star - R_t)."""
    returns = np.asarray(returns, dtype=np.float64)
    if returns.size == 0:
        raise ValueError("regret needs at least one episode return")
    return float(np.mean(r_star - returns))


def pgd_ascent(value_and_grad: Callable, a0: np.ndarray, epsilon: float, steps: int, step_size: float) -> tuple[np.ndarray, np.ndarray]:
    """Sign-gradient ascent projected onto the eps-box around a0 intersected with [-1, 1]^d.

    ``value_and_grad(a)`` maps (n, d) actions to ((n,) values, (n, d) grads).
    Keeps the best iterate per row, so the gain never decreases with ``steps``.
    Returns (best actions, value gain).
    """
    a0 = np.asarray(a0, dtype=np.float64)
    lo = np.maximum(a0 - epsilon, -1.0)
    hi = np.minimum(a0 + epsilon, 1.0)
    v0, g = value_and_grad(a0)
    best_a, best_v = a0.copy(), v0.copy()
    a = a0
    for _ in range(steps):
        a = np.clip(a + step_size * np.sign(g), lo, hi)
        v, g = value_and_grad(a)
        better = v > best_v
        best_a[better] = a[better]
        best_v = np.where(better, v, best_v)
    return best_a, best_v - v0


def critic_value_and_grad(objectives: Objectives, params: AgentParams, z: np.ndarray, critic: str = "critic_1"):
    """Closure giving decoded Q(z, a) and dQ/da for a fixed batch of latents."""
    c = objectives.cfg
    t = Tape()
    a_in = t.input("a", (None, c.act_dim), requires_grad=True)
    logits = build_critic(t, t.input("z", (None, c.latent)), a_in, "critic", trainable=False)
    q = t.matmul(t.softmax(logits), t.const(objectives.bins.centers[:, None]))
    t.output(t.sum(q), q)
    flat = getattr(params, critic).prefixed("critic")

    def fn(a):
        _, qv = t.forward(flat, {"z": z, "a": a})
        return qv[:, 0], t.backward()["a"]

    return fn


def adversarial_probe(objectives: Objectives, params: AgentParams, obs: np.ndarray, epsilon: float = 0.1, steps: int = 10, step_size: float = 0.01) -> float:
    """Mean |Q(z, a~) - Q(z, pi(z))| after projected sign-gradient ascent on the action."""
    if epsilon <= 0:
        return 0.0
    z = objectives.nets.encode(params, obs)
    a0 = objectives.nets.actor(params, z)
    _, gain = pgd_ascent(critic_value_and_grad(objectives, params, z), a0, epsilon, steps, step_size)
    return float(np.mean(np.abs(gain)))


def bootstrap_ci(values: Sequence[float], n_resamples: int = 10000, level: float = 0.95, seed: int = 0) -> tuple[float, float, float]:
    """(mean, low, high) percentile bootstrap interval for the mean."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("bootstrap needs at least one value")
    rng = np.random.default_rng(seed)
    means = x[rng.integers(0, x.size, size=(n_resamples, x.size))].mean(axis=1)
    tail = 100 * (1 - level) / 2
    lo, hi = np.percentile(means, [tail, 100 - tail])
    return float(x.mean()), float(lo), float(hi)
