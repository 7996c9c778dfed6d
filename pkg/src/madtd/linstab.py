"""Linear TD stability on tabular MDPs.

Matrices follow the state-action convention of :class:`~madtd.envs.TabularMdp`:
``P`` is (XA, X), a policy ``Pi`` is (X, XA), so ``P @ Pi`` is the
state-action transition matrix under the policy.  Features ``Phi`` are
(feature_dim, XA) and Q = Phi.T @ theta.
"""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .envs import TabularMdp

PD_TOL = 1e-10
DIVERGENCE_NORM = 1e6


@dataclass
class OccupancyDiag:
    D: np.ndarray  # (XA, XA) diagonal
    policy_id: str = ""

    @property
    def mu(self) -> np.ndarray:
        return np.diag(self.D)


def policy_matrix(probs: np.ndarray) -> np.ndarray:
    """Build Pi (X, XA) from an (X, A) table of action probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    X, A = probs.shape
    if np.any(probs < 0) or np.max(np.abs(probs.sum(axis=1) - 1.0)) > 1e-12:
        raise ValueError("each row of the action table must be a distribution")
    Pi = np.zeros((X, X * A))
    for x in range(X):
        Pi[x, x * A : (x + 1) * A] = probs[x]
    return Pi


def random_policy(num_states: int, num_actions: int, seed=None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(num_actions), size=num_states)
    return policy_matrix(probs / probs.sum(axis=1, keepdims=True))


def _check_policy(mdp: TabularMdp, Pi: np.ndarray) -> np.ndarray:
    Pi = np.asarray(Pi, dtype=np.float64)
    X, A = mdp.num_states, mdp.num_actions
    if Pi.shape != (X, X * A):
        raise ValueError(f"policy matrix must have shape {(X, X * A)}, got {Pi.shape}")
    mask = np.kron(np.eye(X), np.ones((1, A)))
    if np.any(Pi[mask == 0] != 0) or np.any(Pi < 0) or np.max(np.abs(Pi.sum(axis=1) - 1)) > 1e-12:
        raise ValueError("policy rows must be distributions supported on their own state's actions")
    return Pi


def discounted_occupancy(mdp: TabularMdp, Pi: np.ndarray, policy_id: str = "") -> OccupancyDiag:
    """(1 - gamma) d0^T (I - gamma P Pi)^-1 with d0 = rho^T Pi, as a diagonal matrix."""
    Pi = _check_policy(mdp, Pi)
    d0 = mdp.rho @ Pi
    n = mdp.num_pairs
    M = np.eye(n) - mdp.gamma * (mdp.P @ Pi)
    try:
        mu = (1.0 - mdp.gamma) * np.linalg.solve(M.T, d0)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular occupancy system") from exc
    return OccupancyDiag(np.diag(mu), policy_id)


def truncated_occupancy(mdp: TabularMdp, Pi: np.ndarray, n_terms: int = 200) -> np.ndarray:
    """Power-series partial sum (1 - gamma) sum_{n<N} gamma^n d0^T (P Pi)^n."""
    Pi = _check_policy(mdp, Pi)
    PPi = mdp.P @ Pi
    d = mdp.rho @ Pi
    total = np.zeros_like(d)
    coef = 1.0
    for _ in range(n_terms):
        total += coef * d
        d = d @ PPi
        coef *= mdp.gamma
    return (1.0 - mdp.gamma) * total


def _weights(weights, n):
    if weights is None:
        return np.ones(n)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ValueError(f"expected {n} buffer weights, got shape {weights.shape}")
    return weights


def key_matrix(occupancies: Sequence[OccupancyDiag], mdp: TabularMdp, target_pi: np.ndarray, weights=None) -> np.ndarray:
    """sum_i w_i D_i (I - gamma P Pi)."""
    target_pi = _check_policy(mdp, target_pi)
    n = mdp.num_pairs
    w = _weights(weights, len(occupancies))
    A = np.eye(n) - mdp.gamma * (mdp.P @ target_pi)
    D = np.zeros((n, n))
    for wi, occ in zip(w, occupancies):
        if occ.D.shape != (n, n):
            raise ValueError(f"occupancy has shape {occ.D.shape}, expected {(n, n)}")
        D += wi * occ.D
    return D @ A


def decompose_key_matrix(occupancies, mdp: TabularMdp, behavior_pis, target_pi, weights=None):
    """Split the key matrix into sum_i D_i (I - gamma P Pi_i) and gamma sum_i D_i P (Pi_i - Pi)."""
    if len(occupancies) != len(behavior_pis):
        raise ValueError(f"{len(occupancies)} occupancies but {len(behavior_pis)} behaviour policies")
    target_pi = _check_policy(mdp, target_pi)
    n = mdp.num_pairs
    w = _weights(weights, len(occupancies))
    onpolicy = np.zeros((n, n))
    residual = np.zeros((n, n))
    for wi, occ, Pi_i in zip(w, occupancies, behavior_pis):
        Pi_i = _check_policy(mdp, Pi_i)
        if occ.D.shape != (n, n):
            raise ValueError(f"occupancy has shape {occ.D.shape}, expected {(n, n)}")
        onpolicy += wi * occ.D @ (np.eye(n) - mdp.gamma * (mdp.P @ Pi_i))
        residual += wi * mdp.gamma * occ.D @ mdp.P @ (Pi_i - target_pi)
    return onpolicy, residual


def is_positive_definite(M: np.ndarray, tol: float = PD_TOL) -> tuple[bool, float]:
    """u^T M u > 0 for all u != 0, tested on the symmetric part (M + M^T) / 2."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    min_eig = float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
    return min_eig > tol, min_eig


def min_sym_eig(M: np.ndarray) -> float:
    return is_positive_definite(M)[1]


def exact_q(mdp: TabularMdp, Pi: np.ndarray) -> np.ndarray:
    """Solve (I - gamma P Pi) Q = R."""
    Pi = _check_policy(mdp, Pi)
    return np.linalg.solve(np.eye(mdp.num_pairs) - mdp.gamma * (mdp.P @ Pi), mdp.R)


@dataclass
class FlowResult:
    times: np.ndarray
    thetas: np.ndarray  # (steps + 1, feature_dim)
    norms: np.ndarray
    diverged: bool

    @property
    def theta(self) -> np.ndarray:
        return self.thetas[-1]


def flow_system(mdp, occupancies, target_pi, Phi, weights=None):
    """Return (K, b) with theta_dot = -2 K theta + 2 b."""
    Phi = np.asarray(Phi, dtype=np.float64)
    if Phi.ndim != 2 or Phi.shape[1] != mdp.num_pairs:
        raise ValueError(f"features must be (d, {mdp.num_pairs}), got {Phi.shape}")
    key = key_matrix(occupancies, mdp, target_pi, weights)
    w = _weights(weights, len(occupancies))
    Dsum = sum(wi * occ.D for wi, occ in zip(w, occupancies))
    return Phi @ key @ Phi.T, Phi @ Dsum @ mdp.R


def gradient_flow(mdp, occupancies, target_pi, Phi, theta0, horizon: float = 100.0, dt: float = 0.01, weights=None) -> FlowResult:
    """RK4 integration of theta_dot = -2 Phi K Phi^T theta + 2 Phi D R.

    Stops early, flagging divergence, once |theta| exceeds 1e6.
    """
    K, b = flow_system(mdp, occupancies, target_pi, Phi, weights)

    def f(theta):
        return -2.0 * (K @ theta) + 2.0 * b

    theta = np.array(theta0, dtype=np.float64).reshape(-1)
    n_steps = int(round(horizon / dt))
    thetas = [theta.copy()]
    diverged = False
    for _ in range(n_steps):
        k1 = f(theta)
        k2 = f(theta + 0.5 * dt * k1)
        k3 = f(theta + 0.5 * dt * k2)
        k4 = f(theta + dt * k3)
        theta = theta + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        thetas.append(theta.copy())
        if not np.all(np.isfinite(theta)) or np.linalg.norm(theta) > DIVERGENCE_NORM:
            diverged = True
            break
    thetas = np.array(thetas)
    return FlowResult(np.arange(len(thetas)) * dt, thetas, np.linalg.norm(thetas, axis=1), diverged)


def fixed_point(mdp, occupancies, target_pi, Phi, weights=None) -> np.ndarray:
    K, b = flow_system(mdp, occupancies, target_pi, Phi, weights)
    return np.linalg.solve(K, b)


# --------------------------------------------------------------------------
# bundled examples


@dataclass
class StabilityExample:
    mdp: TabularMdp
    behavior_pis: list
    target_pi: np.ndarray
    Phi: np.ndarray
    theta0: np.ndarray

    def occupancies(self):
        return [discounted_occupancy(self.mdp, Pi, f"behavior{i}") for i, Pi in enumerate(self.behavior_pis)]


def two_state_example(on_policy: bool, gamma: float = 0.9) -> StabilityExample:
    """Two states with scalar features 1 and 2 (the w -> 2w construction).

    Action 0 moves to state 0, action 1 to state 1, from either state.  Only
    action-1 pairs carry features (1 in state 0, 2 in state 1) and the target
    policy always takes action 1.  Off-policy data come from the uniform
    policy; the scalar key is then (5 - 6 gamma) / 4 and the flow diverges for
    gamma > 5/6.  The on-policy variant collects data with the target policy
    itself and converges.
    """
    P = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    R = np.array([0.0, 0.0, 1.0, 1.0])
    mdp = TabularMdp(P, R, np.array([0.5, 0.5]), gamma, num_actions=2)
    target = policy_matrix(np.array([[0.0, 1.0], [0.0, 1.0]]))
    behavior = target if on_policy else policy_matrix(np.full((2, 2), 0.5))
    Phi = np.array([[0.0, 1.0, 0.0, 2.0]])
    return StabilityExample(mdp, [behavior], target, Phi, np.array([1.0]))


def random_example(num_states: int, num_actions: int, gamma: float, seed: int, on_policy: bool, num_buffers: int = 2, feature_dim: int | None = None) -> StabilityExample:
    from .envs import random_mdp

    rng = np.random.default_rng(seed)
    mdp = random_mdp(num_states, num_actions, gamma, seed=rng)
    target = random_policy(num_states, num_actions, rng)
    if on_policy:
        behavior = [target]
    else:
        behavior = [random_policy(num_states, num_actions, rng) for _ in range(num_buffers)]
    n = num_states * num_actions
    d = n if feature_dim is None else feature_dim
    Phi = np.eye(n) if d == n else rng.normal(size=(d, n))
    return StabilityExample(mdp, behavior, target, Phi, rng.normal(size=d))


EXAMPLES = {
    "divergent2state": lambda: two_state_example(on_policy=False),
    "onpolicy": lambda: two_state_example(on_policy=True),
}


def stability_report(ex: StabilityExample, horizon: float = 100.0, dt: float = 0.01, stride: int = 10) -> dict:
    """Eigen-summary of the key matrix and its parts plus the |theta| trajectory.

    The norm series keeps every ``stride``-th integration point and always the last.
    """
    occ = ex.occupancies()
    key = key_matrix(occ, ex.mdp, ex.target_pi)
    onpol, resid = decompose_key_matrix(occ, ex.mdp, ex.behavior_pis, ex.target_pi)
    flow = gradient_flow(ex.mdp, occ, ex.target_pi, ex.Phi, ex.theta0, horizon, dt)
    idx = list(range(0, len(flow.norms), max(int(stride), 1)))
    if idx[-1] != len(flow.norms) - 1:
        idx.append(len(flow.norms) - 1)
    return {
        "min_eig_key": min_sym_eig(key),
        "min_eig_onpolicy": min_sym_eig(onpol),
        "min_eig_residual": min_sym_eig(resid),
        "diverged": bool(flow.diverged),
        "final_theta_norm": float(flow.norms[-1]),
        "theta_norm_series": [float(flow.norms[i]) for i in idx],
    }
