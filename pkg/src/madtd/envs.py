"""Analytic control tasks with exact reset-to-state, and random tabular MDPs.

Dynamics are pure functions of (state, action): ``step`` never mutates its
argument, so resetting to a recorded state and replaying the same actions
reproduces the recorded trajectory bit for bit.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

HORIZON = 500


@dataclass(frozen=True)
class EnvState:
    x: np.ndarray  # raw simulator state
    t: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x", np.array(self.x, dtype=np.float64))

    def __eq__(self, other):
        return isinstance(other, EnvState) and self.t == other.t and np.array_equal(self.x, other.x)


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool
    source: str = "real"
    # raw simulator state at ``state``; lets probes reset the simulator there
    sim_state: EnvState | None = None

    def __post_init__(self):
        if self.source not in ("real", "model"):
            raise ValueError(f"source must be 'real' or 'model', got {self.source!r}")
        if not math.isfinite(self.reward):
            raise ValueError("reward must be finite")
        if np.any(np.abs(self.action) > 1.0):
            raise ValueError("action outside [-1, 1]")


def wrap_angle(theta):
    """Wrap to [-pi, pi)."""
    return (np.asarray(theta) + np.pi) % (2.0 * np.pi) - np.pi


class Pendulum:
    """Pendulum swing-up from the hanging position.

    State is (theta, omega) with theta = 0 upright and +-pi hanging down.
    Observation is (cos theta, sin theta, omega / max_speed).  The reward
    ``exp(-reward_scale * (theta^2 + 0.1 omega^2 + 0.001 u^2))`` lies in (0, 1]
    and equals 1 only upright, at rest, with zero torque.
    """

    id = "pendulum_swingup"
    obs_dim = 3
    act_dim = 1
    state_dim = 2

    def __init__(
        self,
        dt: float = 0.05,
        substeps: int = 10,
        gravity: float = 10.0,
        mass: float = 1.0,
        length: float = 1.0,
        damping: float = 0.0,
        max_torque: float = 12.0,
        max_speed: float = 8.0,
        reward_scale: float = 0.25,
        start_noise: float = 0.1,
        horizon: int = HORIZON,
    ):
        self.dt = dt
        self.substeps = substeps
        self.gravity = gravity
        self.mass = mass
        self.length = length
        self.damping = damping
        self.max_torque = max_torque
        self.max_speed = max_speed
        self.reward_scale = reward_scale
        self.start_noise = start_noise
        self.horizon = horizon

    def reset(self, seed=None) -> EnvState:
        """Hanging down; angle offset and velocity each uniform in +-start_noise."""
        rng = np.random.default_rng(seed)
        offset, omega = rng.uniform(-self.start_noise, self.start_noise, size=2)
        return EnvState(np.array([wrap_angle(np.pi + offset), omega]), 0)

    def reset_to(self, state: EnvState) -> EnvState:
        x = np.asarray(state.x, dtype=np.float64)
        if x.shape != (2,) or not np.all(np.isfinite(x)):
            raise ValueError(f"invalid pendulum state {x!r}")
        if not (-np.pi <= x[0] < np.pi) or abs(x[1]) > self.max_speed:
            raise ValueError(f"pendulum state out of bounds: {x!r}")
        if not 0 <= state.t < self.horizon:
            raise ValueError(f"step counter {state.t} outside [0, {self.horizon})")
        return EnvState(x.copy(), int(state.t))

    def _accel(self, theta, omega, torque):
        inertia = self.mass * self.length**2
        return (self.mass * self.gravity * self.length * np.sin(theta) - self.damping * omega + torque) / inertia

    def step(self, state: EnvState, action) -> tuple[EnvState, float, bool]:
        u = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0)) * self.max_torque
        theta, omega = float(state.x[0]), float(state.x[1])
        reward = self.reward(theta, omega, u)
        h = self.dt / self.substeps
        for _ in range(self.substeps):
            # semi-implicit Euler: velocity first, then position with the new velocity
            omega = omega + h * self._accel(theta, omega, u)
            omega = min(max(omega, -self.max_speed), self.max_speed)
            theta = theta + h * omega
        t = state.t + 1
        nxt = EnvState(np.array([float(wrap_angle(theta)), omega]), t)
        return nxt, reward, t >= self.horizon

    def reward(self, theta, omega, torque) -> float:
        theta = float(wrap_angle(theta))
        cost = theta * theta + 0.1 * omega * omega + 0.001 * torque * torque
        return math.exp(-self.reward_scale * cost)

    def observe(self, state: EnvState) -> np.ndarray:
        theta, omega = state.x
        return np.array([math.cos(theta), math.sin(theta), omega / self.max_speed])

    def observe_batch(self, states: np.ndarray) -> np.ndarray:
        return np.stack([np.cos(states[:, 0]), np.sin(states[:, 0]), states[:, 1] / self.max_speed], axis=1)

    def energy(self, state: EnvState) -> float:
        """Mechanical energy, zero when hanging at rest."""
        theta, omega = state.x
        m, l, g = self.mass, self.length, self.gravity
        return 0.5 * m * l * l * omega * omega + m * g * l * (1.0 + math.cos(theta))


class PointMass:
    """Force-controlled point mass in the box [-1, 1]^2 with a goal at the origin.

    State and observation are (px, py, vx, vy).  Hitting a wall zeroes the
    normal velocity.  Reward ``exp(-|p - goal|^2 / reward_width)``.
    """

    id = "point_mass"
    obs_dim = 4
    act_dim = 2
    state_dim = 4

    def __init__(
        self,
        dt: float = 0.05,
        max_force: float = 2.0,
        max_speed: float = 2.0,
        damping: float = 0.1,
        reward_width: float = 0.1,
        goal=(0.0, 0.0),
        horizon: int = HORIZON,
    ):
        self.dt = dt
        self.max_force = max_force
        self.max_speed = max_speed
        self.damping = damping
        self.reward_width = reward_width
        self.goal = np.asarray(goal, dtype=np.float64)
        self.horizon = horizon

    def reset(self, seed=None) -> EnvState:
        """Position uniform on the box, zero velocity."""
        rng = np.random.default_rng(seed)
        pos = rng.uniform(-1.0, 1.0, size=2)
        return EnvState(np.concatenate([pos, np.zeros(2)]), 0)

    def reset_to(self, state: EnvState) -> EnvState:
        x = np.asarray(state.x, dtype=np.float64)
        if x.shape != (4,) or not np.all(np.isfinite(x)):
            raise ValueError(f"invalid point-mass state {x!r}")
        if np.any(np.abs(x[:2]) > 1.0) or np.any(np.abs(x[2:]) > self.max_speed):
            raise ValueError(f"point-mass state out of bounds: {x!r}")
        if not 0 <= state.t < self.horizon:
            raise ValueError(f"step counter {state.t} outside [0, {self.horizon})")
        return EnvState(x.copy(), int(state.t))

    def step(self, state: EnvState, action) -> tuple[EnvState, float, bool]:
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[:2], -1.0, 1.0)
        pos, vel = state.x[:2], state.x[2:]
        reward = self.reward(pos)
        vel = vel + self.dt * (self.max_force * a - self.damping * vel)
        vel = np.clip(vel, -self.max_speed, self.max_speed)
        pos = pos + self.dt * vel
        hit = np.abs(pos) > 1.0
        pos = np.clip(pos, -1.0, 1.0)
        vel = np.where(hit, 0.0, vel)
        t = state.t + 1
        return EnvState(np.concatenate([pos, vel]), t), reward, t >= self.horizon

    def reward(self, pos) -> float:
        d = np.asarray(pos) - self.goal
        return math.exp(-float(d @ d) / self.reward_width)

    def observe(self, state: EnvState) -> np.ndarray:
        return state.x.copy()

    def observe_batch(self, states: np.ndarray) -> np.ndarray:
        return np.array(states, dtype=np.float64)


ENVS = {Pendulum.id: Pendulum, PointMass.id: PointMass}


def make_env(env_id: str, **kwargs):
    try:
        return ENVS[env_id](**kwargs)
    except KeyError:
        raise ValueError(f"unknown environment {env_id!r}; choose from {sorted(ENVS)}") from None


def write_trajectory_csv(path, env, observations, actions, rewards) -> None:
    """Dump a trajectory with header ``t,s0..,a0..,reward``."""
    header = ["t"] + [f"s{i}" for i in range(env.obs_dim)] + [f"a{i}" for i in range(env.act_dim)] + ["reward"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, (o, a, r) in enumerate(zip(observations, actions, rewards)):
            w.writerow([t, *(repr(float(v)) for v in o), *(repr(float(v)) for v in np.ravel(a)), repr(float(r))])


# --------------------------------------------------------------------------
# tabular MDPs


@dataclass
class TabularMdp:
    """Finite MDP with state-action pairs indexed ``x * A + a``.

    P has shape (X*A, X), R has length X*A and rho length X.
    """

    P: np.ndarray
    R: np.ndarray
    rho: np.ndarray
    gamma: float
    num_actions: int = field(default=1)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        X = self.P.shape[1]
        if self.P.shape != (X * self.num_actions, X):
            raise ValueError(f"P must have shape (X*A, X) = ({X * self.num_actions}, {X}), got {self.P.shape}")
        if self.R.shape != (X * self.num_actions,) or self.rho.shape != (X,):
            raise ValueError("R must have length X*A and rho length X")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("rows of P must be nonnegative and sum to 1")
        if np.any(self.rho < 0) or abs(self.rho.sum() - 1.0) > 1e-12:
            raise ValueError("rho must be a probability vector")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")

    @property
    def num_states(self) -> int:
        return self.P.shape[1]

    @property
    def num_pairs(self) -> int:
        return self.P.shape[0]


def _dirichlet_rows(rng, n_rows, n_cols):
    rows = rng.dirichlet(np.ones(n_cols), size=n_rows)
    # exact renormalisation so row sums are 1 to the last ulp the check allows
    return rows / rows.sum(axis=1, keepdims=True)


def random_mdp(num_states: int, num_actions: int, gamma: float, seed=None) -> TabularMdp:
    """P rows ~ Dirichlet(1), R ~ U[0, 1], rho ~ Dirichlet(1)."""
    if num_states < 1 or num_actions < 1:
        raise ValueError("need at least one state and one action")
    rng = np.random.default_rng(seed)
    P = _dirichlet_rows(rng, num_states * num_actions, num_states)
    R = rng.uniform(0.0, 1.0, size=num_states * num_actions)
    rho = _dirichlet_rows(rng, 1, num_states)[0]
    return TabularMdp(P, R, rho, gamma, num_actions)
