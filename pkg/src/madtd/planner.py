"""One-step model-predictive action selection with a CEM-style sampler."""
from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

MIN_STD = 1e-6


@dataclass(frozen=True)
class MpcConfig:
    enabled: bool = False
    num_samples: int = 512
    iterations: int = 6
    top_k: int = 64
    temperature: float = 0.5
    init_std: float = 0.5

    def __post_init__(self):
        if not 1 <= self.top_k <= self.num_samples:
            raise ValueError("need 1 <= top_k <= num_samples")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def cem(score_fn: Callable[[np.ndarray], np.ndarray], mean, cfg: MpcConfig, rng, std=None) -> np.ndarray:
    """Maximise ``score_fn`` over actions in [-1, 1]^d.

    Each iteration samples ``num_samples`` actions from N(mean, std^2)
    (clipped), keeps the ``top_k`` best and refits mean and std with weights
    softmax(score / temperature) over those elites.
    """
    mean = np.clip(np.asarray(mean, dtype=np.float64).reshape(-1), -1.0, 1.0)
    std = np.full_like(mean, cfg.init_std) if std is None else np.asarray(std, dtype=np.float64)
    for _ in range(cfg.iterations):
        if np.all(std < MIN_STD):
            break
        actions = np.clip(mean + std * rng.standard_normal((cfg.num_samples, mean.size)), -1.0, 1.0)
        scores = np.asarray(score_fn(actions), dtype=np.float64).reshape(-1)
        elite = np.argsort(-scores, kind="stable")[: cfg.top_k]
        s = scores[elite] / cfg.temperature
        w = np.exp(s - s.max())
        w /= w.sum()
        a = actions[elite]
        mean = w @ a
        std = np.sqrt(w @ (a - mean) ** 2)
    return np.clip(mean, -1.0, 1.0)


def model_score(nets, params, z: np.ndarray, gamma: float) -> Callable[[np.ndarray], np.ndarray]:
    """r_hat(z, a) + gamma * min_i Q_i(z'_hat, actor(z'_hat)) for a batch of actions."""

    def score(actions):
        zs = np.repeat(z[None], len(actions), axis=0)
        z_next, r_hat = nets.model_step(params, zs, actions)
        return r_hat + gamma * nets.min_q(params, z_next, nets.actor(params, z_next))

    return score


def plan(nets, params, z: np.ndarray, cfg: MpcConfig, rng, gamma: float = 0.99) -> np.ndarray:
    """Action for latent ``z``; the actor's output when MPC is disabled."""
    a0 = nets.actor(params, z)
    if not cfg.enabled:
        return a0
    return cem(model_score(nets, params, z, gamma), a0, cfg, rng)
