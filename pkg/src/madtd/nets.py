"""Encoder, latent model, double critic and actor, plus the HL-Gauss value codec.

Networks are described once as tape builders; the same builders back the
training losses (with gradients) and plain inference (forward only).
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .numkernel import ParamStore, Tape, softmax

CRITICS = ("critic_1", "critic_2")
TARGETS = ("target_critic_1", "target_critic_2")
RESET_GROUPS = ("actor",) + CRITICS + TARGETS


@dataclass(frozen=True)
class NetConfig:
    obs_dim: int
    act_dim: int
    hidden: int = 128
    latent: int = 64
    simnorm_group: int = 8
    model_hidden: int | None = None  # latent model width; defaults to ``hidden``
    num_bins: int = 101
    vmax: float = 100.0
    sigma_ratio: float = 0.75

    def __post_init__(self):
        if self.latent % self.simnorm_group:
            raise ValueError("latent size must be a multiple of the SimNorm group size")
        if self.num_bins % 2 == 0:
            raise ValueError("num_bins must be odd")

    @property
    def model_width(self) -> int:
        return self.model_hidden or self.hidden

    @property
    def bins(self) -> BinGeometry:
        return BinGeometry(-self.vmax, self.vmax, self.num_bins, self.sigma_ratio)


# --------------------------------------------------------------------------
# HL-Gauss


@dataclass(frozen=True)
class BinGeometry:
    vmin: float
    vmax: float
    num_bins: int
    sigma_ratio: float = 0.75

    @property
    def width(self) -> float:
        return (self.vmax - self.vmin) / self.num_bins

    @property
    def sigma(self) -> float:
        return self.sigma_ratio * self.width

    @property
    def edges(self) -> np.ndarray:
        return _edges(self.vmin, self.vmax, self.num_bins)

    @property
    def centers(self) -> np.ndarray:
        return _centers(self.vmin, self.vmax, self.num_bins)


@lru_cache(maxsize=None)
def _edges(vmin, vmax, n):
    if vmin == -vmax and n % 2 == 1:
        # mirrored like the centres: e[i] == -e[-1 - i] exactly
        w = (vmax - vmin) / n
        pos = w * (np.arange(n // 2 + 1) + 0.5)
        pos[-1] = vmax
        e = np.concatenate([-pos[::-1], pos])
    else:
        e = np.linspace(vmin, vmax, n + 1)
    e.setflags(write=False)
    return e


@lru_cache(maxsize=None)
def _centers(vmin, vmax, n):
    if vmin != -vmax or n % 2 == 0:
        c = np.linspace(vmin, vmax, n + 1)
        c = 0.5 * (c[1:] + c[:-1])
    else:
        # built from the positive half and mirrored so that c[i] == -c[-1 - i] exactly
        w = (vmax - vmin) / n
        pos = w * np.arange(1, n // 2 + 1)
        c = np.concatenate([-pos[::-1], [0.0], pos])
    c.setflags(write=False)
    return c


def hlgauss_encode(v, bins: BinGeometry) -> np.ndarray:
    """Gaussian mass N(v, sigma^2) per bin, renormalised to the support.

    Accepts a scalar or an array of values; returns (..., num_bins).
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot encode non-finite values")
    v = np.clip(v, bins.vmin, bins.vmax)
    u = (bins.edges - v[..., None]) / bins.sigma
    lo, hi = u[..., :-1], u[..., 1:]
    # upper-tail form above v keeps the encoding exactly mirror-symmetric
    mass = np.where(lo >= 0, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))
    return mass / mass.sum(axis=-1, keepdims=True)


def hlgauss_decode(probs, bins: BinGeometry) -> np.ndarray:
    """Expectation of bin centres under ``probs`` (last axis)."""
    probs = np.asarray(probs, dtype=np.float64)
    c = bins.centers
    n = bins.num_bins
    if bins.vmin == -bins.vmax and n % 2 == 1 and n > 1:
        # pairwise form: mirrored bins cancel exactly for symmetric probabilities
        m = n // 2
        return (probs[..., m + 1 :] - probs[..., m - 1 :: -1]) @ c[m + 1 :]
    return probs @ c


def entropy(probs) -> np.ndarray:
    p = np.asarray(probs)
    return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=-1)


# --------------------------------------------------------------------------
# tape builders


FROZEN = "frozen"


def _leaf(tape: Tape, name: str, trainable):
    if trainable == FROZEN:
        # trainable leaf behind a stop-gradient: shows up in gradients as exact zeros
        return tape.stop_gradient(tape.param(name, True))
    return tape.param(name, bool(trainable))


def dense(tape: Tape, x, prefix: str, trainable=True):
    """Affine layer; ``trainable`` is True, False or FROZEN."""
    return tape.affine(x, _leaf(tape, f"{prefix}.w", trainable), _leaf(tape, f"{prefix}.b", trainable))


def normed(tape: Tape, x, prefix: str, trainable=True):
    """Affine layer followed by LayerNorm with learned gain ``g`` and shift ``s``."""
    h = tape.layer_norm(dense(tape, x, prefix, trainable))
    return tape.add(tape.mul(h, _leaf(tape, f"{prefix}.g", trainable)), _leaf(tape, f"{prefix}.s", trainable))


def build_encoder(tape: Tape, obs, cfg: NetConfig, prefix="encoder", trainable=True):
    h = tape.mish(normed(tape, obs, f"{prefix}.l0", trainable))
    logits = normed(tape, h, f"{prefix}.l1", trainable)
    return tape.softmax(logits, group=cfg.simnorm_group)


def build_model(tape: Tape, z, action, cfg: NetConfig, prefix="latent_model", trainable=True):
    """Returns (next latent, next latent log-probabilities, reward prediction)."""
    h = tape.mish(normed(tape, tape.concat([z, action]), f"{prefix}.l0", trainable))
    h = tape.mish(normed(tape, h, f"{prefix}.l1", trainable))
    logits = normed(tape, h, f"{prefix}.next", trainable)
    reward = dense(tape, h, f"{prefix}.reward", trainable)
    return (
        tape.softmax(logits, group=cfg.simnorm_group),
        tape.log_softmax(logits, group=cfg.simnorm_group),
        reward,
    )


def build_critic(tape: Tape, z, action, prefix: str, trainable=True):
    """Logits over value bins."""
    h = tape.mish(normed(tape, tape.concat([z, action]), f"{prefix}.l0", trainable))
    h = tape.mish(normed(tape, h, f"{prefix}.l1", trainable))
    return dense(tape, h, f"{prefix}.out", trainable)


def build_actor(tape: Tape, z, prefix="actor", trainable=True):
    h = tape.mish(normed(tape, z, f"{prefix}.l0", trainable))
    h = tape.mish(normed(tape, h, f"{prefix}.l1", trainable))
    return tape.tanh(dense(tape, h, f"{prefix}.out", trainable))


# --------------------------------------------------------------------------
# parameters


def _layer(rng, fan_in, fan_out, zero=False, norm=False):
    if zero:
        w = np.zeros((fan_in, fan_out))
    else:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    arrays = {"w": w, "b": np.zeros(fan_out)}
    if norm:
        arrays.update(g=np.ones(fan_out), s=np.zeros(fan_out))
    return arrays


def _store(layers: dict) -> ParamStore:
    store = ParamStore()
    for name, arrays in layers.items():
        for k, v in arrays.items():
            store.create(f"{name}.{k}", v)
    return store


def init_encoder(cfg: NetConfig, rng) -> ParamStore:
    return _store({"l0": _layer(rng, cfg.obs_dim, cfg.hidden, norm=True), "l1": _layer(rng, cfg.hidden, cfg.latent, norm=True)})


def init_model(cfg: NetConfig, rng) -> ParamStore:
    w = cfg.model_width
    return _store(
        {
            "l0": _layer(rng, cfg.latent + cfg.act_dim, w, norm=True),
            "l1": _layer(rng, w, w, norm=True),
            "next": _layer(rng, w, cfg.latent, norm=True),
            "reward": _layer(rng, w, 1),
        }
    )


def init_critic(cfg: NetConfig, rng) -> ParamStore:
    # zero output layer: uniform bins, decoded value exactly 0
    return _store(
        {
            "l0": _layer(rng, cfg.latent + cfg.act_dim, cfg.hidden, norm=True),
            "l1": _layer(rng, cfg.hidden, cfg.hidden, norm=True),
            "out": _layer(rng, cfg.hidden, cfg.num_bins, zero=True),
        }
    )


def init_actor(cfg: NetConfig, rng) -> ParamStore:
    return _store(
        {
            "l0": _layer(rng, cfg.latent, cfg.hidden, norm=True),
            "l1": _layer(rng, cfg.hidden, cfg.hidden, norm=True),
            "out": _layer(rng, cfg.hidden, cfg.act_dim),
        }
    )


@dataclass
class AgentParams:
    encoder: ParamStore
    latent_model: ParamStore
    critic_1: ParamStore
    critic_2: ParamStore
    target_critic_1: ParamStore
    target_critic_2: ParamStore
    actor: ParamStore

    def groups(self) -> dict[str, ParamStore]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def flat(self, *names: str) -> dict[str, np.ndarray]:
        out = {}
        for name in names or self.groups():
            out.update(getattr(self, name).prefixed(name))
        return out

    def copy(self) -> AgentParams:
        return AgentParams(**{k: v.copy() for k, v in self.groups().items()})


def init_agent(cfg: NetConfig, rng) -> AgentParams:
    encoder = init_encoder(cfg, rng)
    model = init_model(cfg, rng)
    c1, c2 = init_critic(cfg, rng), init_critic(cfg, rng)
    actor = init_actor(cfg, rng)
    return AgentParams(encoder, model, c1, c2, c1.copy(), c2.copy(), actor)


def reinit_agent_heads(params: AgentParams, cfg: NetConfig, rng) -> None:
    """Fresh actor, critics and target critics; encoder and model are kept."""
    c1, c2 = init_critic(cfg, rng), init_critic(cfg, rng)
    params.critic_1, params.critic_2 = c1, c2
    params.target_critic_1, params.target_critic_2 = c1.copy(), c2.copy()
    params.actor = init_actor(cfg, rng)


# --------------------------------------------------------------------------
# inference


class Networks:
    """Forward-only evaluation of the agent's networks for one NetConfig."""

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        self.bins = cfg.bins
        L, A = cfg.latent, cfg.act_dim

        t = Tape()
        t.output(build_encoder(t, t.input("obs", (None, cfg.obs_dim)), cfg, trainable=False))
        self._encode = t

        t = Tape()
        nxt, _, rew = build_model(t, t.input("z", (None, L)), t.input("a", (None, A)), cfg, trainable=False)
        t.output(nxt, rew)
        self._model = t

        t = Tape()
        t.output(build_critic(t, t.input("z", (None, L)), t.input("a", (None, A)), "critic", trainable=False))
        self._critic = t

        t = Tape()
        t.output(build_actor(t, t.input("z", (None, L)), trainable=False))
        self._actor = t

    @staticmethod
    def _rows(x):
        x = np.asarray(x, dtype=np.float64)
        return (x[None], True) if x.ndim == 1 else (x, False)

    def encode(self, params: AgentParams, obs) -> np.ndarray:
        obs, single = self._rows(obs)
        (z,) = self._encode.forward(params.encoder.prefixed("encoder"), {"obs": obs})
        return z[0] if single else z

    def model_step(self, params: AgentParams, z, action) -> tuple[np.ndarray, np.ndarray]:
        z, single = self._rows(z)
        action = np.clip(np.asarray(action, dtype=np.float64).reshape(z.shape[0], -1), -1.0, 1.0)
        nxt, rew = self._model.forward(params.latent_model.prefixed("latent_model"), {"z": z, "a": action})
        rew = rew[:, 0]
        return (nxt[0], rew[0]) if single else (nxt, rew)

    def critic_logits(self, store: ParamStore, z, action) -> np.ndarray:
        z, single = self._rows(z)
        action = np.asarray(action, dtype=np.float64).reshape(z.shape[0], -1)
        (logits,) = self._critic.forward(store.prefixed("critic"), {"z": z, "a": action})
        return logits[0] if single else logits

    def critic_probs(self, store: ParamStore, z, action) -> np.ndarray:
        return softmax(self.critic_logits(store, z, action))

    def q_value(self, store: ParamStore, z, action) -> np.ndarray:
        return hlgauss_decode(self.critic_probs(store, z, action), self.bins)

    def min_q(self, params: AgentParams, z, action, target: bool = False) -> np.ndarray:
        names = TARGETS if target else CRITICS
        return np.minimum(*(self.q_value(getattr(params, n), z, action) for n in names))

    def actor(self, params: AgentParams, z) -> np.ndarray:
        z, single = self._rows(z)
        (a,) = self._actor.forward(params.actor.prefixed("actor"), {"z": z})
        return a[0] if single else a

    def policy(self, params: AgentParams, obs) -> np.ndarray:
        return self.actor(params, self.encode(params, obs))


# --------------------------------------------------------------------------
# checkpoints


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (raw little-endian float64) and ``<path>.json`` (manifest)."""
    path = Path(path)
    entries, offset = [], 0
    bin_path, json_path = path.with_suffix(".bin"), path.with_suffix(".json")
    tmp = bin_path.with_suffix(".bin.tmp")
    with open(tmp, "wb") as fh:
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    os.replace(tmp, bin_path)
    manifest = {"dtype": "float64", "byteorder": "little", "arrays": entries, "config": config, "config_hash": config_hash(config)}
    tmp = json_path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str), encoding="utf-8")
    os.replace(tmp, json_path)
    return bin_path, json_path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    raw = path.with_suffix(".bin").read_bytes()
    arrays = {}
    for e in manifest["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).copy()
    if config_hash(manifest["config"]) != manifest["config_hash"]:
        raise ValueError(f"checkpoint {path} config hash mismatch")
    return arrays, manifest


def params_to_arrays(params: AgentParams) -> dict[str, np.ndarray]:
    return params.flat()


def params_from_arrays(arrays: dict[str, np.ndarray]) -> AgentParams:
    groups: dict[str, ParamStore] = {f.name: ParamStore() for f in fields(AgentParams)}
    for key, value in arrays.items():
        group, _, name = key.partition(".")
        if group in groups:
            groups[group].create(name, value)
    return AgentParams(**groups)


def netconfig_dict(cfg: NetConfig) -> dict:
    return asdict(cfg)
