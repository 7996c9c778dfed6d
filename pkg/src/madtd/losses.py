"""Training objectives and their gradient routing.

Routing rules:

* TD targets are computed outside any tape (pure stop-gradient).
* The critic loss trains both critic heads; it reaches the encoder only
  through rows tagged as real data.
* The model loss (reward MSE + next-latent cross-entropy + value consistency)
  trains the latent model and encoder.  Critic parameters sit behind a
  stop-gradient there.
* The actor loss trains the actor only; latents and critic are frozen.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .envs import Transition
from .nets import (
    CRITICS,
    FROZEN,
    AgentParams,
    NetConfig,
    Networks,
    build_actor,
    build_critic,
    build_encoder,
    build_model,
    hlgauss_encode,
)
from .numkernel import Tape


@dataclass
class Batch:
    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray
    is_model: np.ndarray = None
    # next-state latent for model-generated rows (NaN on real rows)
    next_latent: np.ndarray | None = None
    indices: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.obs)
        self.reward = np.asarray(self.reward, dtype=np.float64).reshape(n)
        self.terminal = np.asarray(self.terminal, dtype=bool).reshape(n)
        self.action = np.asarray(self.action, dtype=np.float64).reshape(n, -1)
        if self.is_model is None:
            self.is_model = np.zeros(n, dtype=bool)
        for f in ("action", "reward", "next_obs", "terminal", "is_model"):
            if len(getattr(self, f)) != n:
                raise ValueError(f"batch field {f!r} has {len(getattr(self, f))} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def real_mask(self) -> np.ndarray:
        return (~self.is_model).astype(np.float64)[:, None]

    def copy(self) -> Batch:
        kw = {f.name: (None if getattr(self, f.name) is None else np.array(getattr(self, f.name))) for f in fields(self)}
        return Batch(**kw)

    def subset(self, rows) -> Batch:
        kw = {f.name: (None if getattr(self, f.name) is None else getattr(self, f.name)[rows]) for f in fields(self)}
        return Batch(**kw)

    @classmethod
    def from_transitions(cls, transitions: list[Transition]) -> Batch:
        return cls(
            obs=np.array([t.state for t in transitions], dtype=np.float64),
            action=np.array([np.ravel(t.action) for t in transitions], dtype=np.float64),
            reward=np.array([t.reward for t in transitions]),
            next_obs=np.array([t.next_state for t in transitions], dtype=np.float64),
            terminal=np.array([t.terminal for t in transitions]),
            is_model=np.array([t.source == "model" for t in transitions]),
        )


@dataclass
class TdTarget:
    probs: np.ndarray  # (B, bins) HL-Gauss encoded targets
    value: np.ndarray  # (B,) scalar targets
    bootstrap_1: np.ndarray  # target critic values at (z', a')
    bootstrap_2: np.ndarray


@dataclass
class ModelLossParts:
    total: float
    reward: float
    forward: float
    value: float
    critic: float = 0.0


@dataclass
class LossReport:
    critic_loss: float = float("nan")
    model_reward_loss: float = float("nan")
    model_forward_loss: float = float("nan")
    model_value_loss: float = float("nan")
    actor_loss: float = float("nan")
    q_mean: float = float("nan")
    target_q_mean: float = float("nan")
    extra: dict = field(default_factory=dict, repr=False)


def _cross_entropy(tape: Tape, target, log_probs):
    """Per-row -sum(target * log_probs), shape (B,)."""
    return tape.scale(tape.sum(tape.mul(target, log_probs), axis=-1), -1.0)


class Objectives:
    """All losses for one network configuration and discount."""

    def __init__(self, cfg: NetConfig, gamma: float = 0.99):
        self.cfg = cfg
        self.gamma = gamma
        self.nets = Networks(cfg)
        self.bins = cfg.bins
        self._tapes: dict = {}
        self._logit_nodes: dict = {}
        self.last_critic_logits: list = []

    # -- tapes ---------------------------------------------------------------

    def _critic_tape(self, train_encoder: bool) -> Tape:
        key = ("critic", train_encoder)
        if key not in self._tapes:
            c = self.cfg
            t = Tape()
            a = t.input("action", (None, c.act_dim))
            target = t.input("target", (None, c.num_bins))
            if train_encoder:
                z = build_encoder(t, t.input("obs", (None, c.obs_dim)), c)
                z = t.stop_gradient(z, mask=t.input("real_mask", (None, 1)))
            else:
                z = t.input("z", (None, c.latent))
            logits = [build_critic(t, z, a, name) for name in CRITICS]
            ces = [_cross_entropy(t, target, t.log_softmax(lg)) for lg in logits]
            t.output(t.scale(t.mean(t.add(*ces)), 0.5))
            self._logit_nodes[train_encoder] = logits
            self._tapes[key] = t
        return self._tapes[key]

    def _model_tape(self, with_critic: bool) -> Tape:
        key = ("model", with_critic)
        if key not in self._tapes:
            c = self.cfg
            t = Tape()
            a = t.input("action", (None, c.act_dim))
            z = build_encoder(t, t.input("obs", (None, c.obs_dim)), c)
            z_next, log_z_next, r_hat = build_model(t, z, a, c)
            l_rew = t.mean(t.square(t.sub(r_hat, t.input("reward", (None, 1)))))
            l_fwd = t.mean(_cross_entropy(t, t.input("next_latent", (None, c.latent)), log_z_next))
            a_next = t.input("next_action", (None, c.act_dim))
            vals = [
                _cross_entropy(
                    t,
                    t.input(f"value_target_{i}", (None, c.num_bins)),
                    t.log_softmax(build_critic(t, z_next, a_next, name, trainable=FROZEN)),
                )
                for i, name in enumerate(CRITICS, 1)
            ]
            l_val = t.scale(t.mean(t.add(*vals)), 0.5)
            total = t.add(t.add(l_rew, l_fwd), l_val)
            outs = [l_rew, l_fwd, l_val]
            if with_critic:
                target = t.input("target", (None, c.num_bins))
                ces = [
                    _cross_entropy(t, target, t.log_softmax(build_critic(t, z, a, name, trainable=FROZEN)))
                    for name in CRITICS
                ]
                l_q = t.scale(t.mean(t.add(*ces)), 0.5)
                total = t.add(total, l_q)
                outs.append(l_q)
            t.output(total, *outs)
            self._tapes[key] = t
        return self._tapes[key]

    def _actor_tape(self, from_obs: bool) -> Tape:
        key = ("actor", from_obs)
        if key not in self._tapes:
            c = self.cfg
            t = Tape()
            if from_obs:
                z = t.stop_gradient(build_encoder(t, t.input("obs", (None, c.obs_dim)), c))
            else:
                z = t.input("z", (None, c.latent))
            a = build_actor(t, z)
            probs = t.softmax(build_critic(t, z, a, "critic_1", trainable=FROZEN))
            q = t.matmul(probs, t.const(self.bins.centers[:, None]))
            t.output(t.scale(t.mean(q), -1.0))
            self._tapes[key] = t
        return self._tapes[key]

    # -- objectives ----------------------------------------------------------

    def td_target(self, params: AgentParams, batch: Batch, z_next: np.ndarray | None = None) -> TdTarget:
        """Clipped double-Q bootstrap, HL-Gauss encoded; no bootstrap on terminal rows."""
        nets = self.nets
        if z_next is None:
            z_next = self.next_latents(params, batch)
        a_next = nets.actor(params, z_next)
        q1 = nets.q_value(params.target_critic_1, z_next, a_next)
        q2 = nets.q_value(params.target_critic_2, z_next, a_next)
        boot = np.where(batch.terminal, 0.0, np.minimum(q1, q2))
        value = batch.reward + self.gamma * boot
        return TdTarget(hlgauss_encode(value, self.bins), value, q1, q2)

    def next_latents(self, params: AgentParams, batch: Batch) -> np.ndarray:
        """Encoded next observations; model rows use their predicted latent."""
        z_next = np.empty((len(batch), self.cfg.latent))
        real = ~batch.is_model
        if real.any():
            z_next[real] = self.nets.encode(params, batch.next_obs[real])
        if (~real).any():
            if batch.next_latent is None:
                raise ValueError("model-tagged rows need a predicted next latent")
            z_next[~real] = batch.next_latent[~real]
        return z_next

    def critic_loss(self, params: AgentParams, batch: Batch, targets: TdTarget, train_encoder: bool = True, z=None, grad: bool = True):
        """Mean over rows and both heads of CE(target, prediction).

        With ``train_encoder`` the gradient also covers the encoder (real rows
        only); otherwise ``z`` may be passed to skip re-encoding.  With
        ``grad=False`` only the loss is computed and the gradient is None.
        """
        tape = self._critic_tape(train_encoder)
        inputs = {"action": batch.action, "target": targets.probs}
        if train_encoder:
            inputs.update(obs=batch.obs, real_mask=batch.real_mask)
            names = ("encoder",) + CRITICS
        else:
            inputs["z"] = self.nets.encode(params, batch.obs) if z is None else z
            names = CRITICS
        (loss,) = tape.forward(params.flat(*names), inputs)
        self.last_critic_logits = [tape.value(n) for n in self._logit_nodes[train_encoder]]
        return float(loss), (tape.backward() if grad else None)

    def model_inputs(self, params: AgentParams, batch: Batch) -> dict:
        """Stop-gradient inputs of the model loss: next latents, next actions, value targets."""
        if batch.is_model.any():
            raise ValueError("model loss accepts real transitions only")
        nets = self.nets
        z_next = nets.encode(params, batch.next_obs)
        a_next = nets.actor(params, z_next)
        inputs = {
            "obs": batch.obs,
            "action": batch.action,
            "reward": batch.reward[:, None],
            "next_latent": z_next,
            "next_action": a_next,
        }
        for i, name in enumerate(CRITICS, 1):
            inputs[f"value_target_{i}"] = nets.critic_probs(getattr(params, name), z_next, a_next)
        return inputs

    MODEL_PARTS = ("total", "reward", "forward", "value", "critic")

    def model_loss(self, params: AgentParams, batch: Batch, targets: TdTarget | None = None, part: str = "total", inputs: dict | None = None):
        """L_rew + L_forward + L_value on real data.

        Passing ``targets`` adds the critic cross-entropy as an encoder-only
        term (critic parameters frozen), which is how the encoder learns from
        the value loss while staying at one update per environment step.
        ``part`` picks which term the returned gradient belongs to.
        """
        if part not in self.MODEL_PARTS or (part == "critic" and targets is None):
            raise ValueError(f"cannot differentiate model loss part {part!r}")
        inputs = dict(self.model_inputs(params, batch) if inputs is None else inputs)
        tape = self._model_tape(targets is not None)
        if targets is not None:
            inputs["target"] = targets.probs
        outs = tape.forward(params.flat("encoder", "latent_model", *CRITICS), inputs)
        parts = ModelLossParts(*(float(v) for v in outs[:4]), critic=float(outs[4]) if len(outs) > 4 else 0.0)
        return parts, tape.backward(output=self.MODEL_PARTS.index(part))

    def actor_loss(self, params: AgentParams, batch: Batch | None = None, z=None):
        """-mean decoded critic_1(z, actor(z)); gradients reach the actor only."""
        if z is None:
            tape = self._actor_tape(True)
            inputs = {"obs": batch.obs}
            names = ("encoder", "actor", "critic_1")
        else:
            tape = self._actor_tape(False)
            inputs = {"z": z}
            names = ("actor", "critic_1")
        (loss,) = tape.forward(params.flat(*names), inputs)
        return float(loss), tape.backward()


def split_grads(grads: dict[str, np.ndarray]) -> dict[str, dict[str, np.ndarray]]:
    """{'critic_1.l0.w': g} -> {'critic_1': {'l0.w': g}}."""
    out: dict[str, dict] = {}
    for key, g in grads.items():
        group, _, name = key.partition(".")
        out.setdefault(group, {})[name] = g
    return out
