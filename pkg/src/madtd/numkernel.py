"""Dense reverse-mode autodiff on numpy arrays, plus Adam and Polyak averaging.

A :class:`Tape` is a define-then-run program: graph-building methods return
:class:`Node` handles, ``forward`` evaluates the whole program for a given set
of parameters and inputs, and ``backward`` propagates an adjoint from the
first output back to every trainable parameter (and every input declared with
``requires_grad``).  Everything is float64.
"""
from __future__ import annotations

from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64
MISH_EXP_CLIP = 20.0
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when an array does not match the shape a tape node declares."""

    def __init__(self, node_id: int, message: str):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


class NonFiniteError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# parameters


class ParamStore(Mapping):
    """Named float64 arrays whose shapes are fixed once created."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        for name, value in (arrays or {}).items():
            self.create(name, value)

    def create(self, name: str, value) -> None:
        if name in self._arrays:
            raise KeyError(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"parameter {name!r} has non-finite entries")
        self._arrays[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value) -> None:
        old = self._arrays[name]
        arr = np.asarray(value, dtype=DTYPE)
        if arr.shape != old.shape:
            raise ShapeError(-1, f"parameter {name!r} has shape {old.shape}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"parameter {name!r} would become non-finite")
        self._arrays[name] = arr.copy()

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def copy(self) -> ParamStore:
        out = ParamStore()
        out._arrays = {k: v.copy() for k, v in self._arrays.items()}
        return out

    def prefixed(self, prefix: str) -> dict[str, np.ndarray]:
        """View of the arrays with names ``prefix.name`` (no copies)."""
        return {f"{prefix}.{k}": v for k, v in self._arrays.items()}

    def num_params(self) -> int:
        return sum(v.size for v in self._arrays.values())

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}: {v.shape}" for k, v in self._arrays.items())
        return f"ParamStore({shapes})"


# --------------------------------------------------------------------------
# tape


@dataclass(eq=False)
class Node:
    id: int
    op: str
    parents: tuple[int, ...]
    requires_grad: bool
    attrs: dict = field(default_factory=dict)

    def __repr__(self) -> str:
        return f"Node({self.id}, {self.op})"


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _grouped(x: np.ndarray, group: int | None) -> np.ndarray:
    if group is None:
        return x
    if x.shape[-1] % group:
        raise ValueError(f"last axis {x.shape[-1]} not divisible by group size {group}")
    return x.reshape(*x.shape[:-1], x.shape[-1] // group, group)


def softmax(x: np.ndarray, group: int | None = None) -> np.ndarray:
    g = _grouped(x, group)
    e = np.exp(g - g.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True)).reshape(x.shape)


def log_softmax(x: np.ndarray, group: int | None = None) -> np.ndarray:
    g = _grouped(x, group)
    s = g - g.max(axis=-1, keepdims=True)
    return (s - np.log(np.exp(s).sum(axis=-1, keepdims=True))).reshape(x.shape)


def mish(x: np.ndarray) -> np.ndarray:
    return _mish_parts(x)[0]


def _mish_parts(x):
    # tanh(softplus(x)) = n / (n + 2) with n = e^x (e^x + 2)
    e = np.exp(np.minimum(x, MISH_EXP_CLIP))
    n = e * (e + 2.0)
    t = n / (n + 2.0)
    return x * t, e, t


class Tape:
    """Recorded program of primitive array operations.

    Build the graph once, then call :meth:`forward` / :meth:`backward` as often
    as needed.  The leading dimension of declared input shapes may be ``None``
    (batch size free).
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.params: dict[str, int] = {}
        self.outputs: list[int] = []
        self._values: list | None = None
        self._aux: dict[int, tuple] = {}

    # -- graph construction ------------------------------------------------

    def _add(self, op: str, parents: Sequence[Node] = (), requires_grad=None, **attrs) -> Node:
        for p in parents:
            if not isinstance(p, Node) or p.id >= len(self.nodes) or self.nodes[p.id] is not p:
                raise ValueError(f"{op}: parent {p!r} does not belong to this tape")
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        node = Node(len(self.nodes), op, tuple(p.id for p in parents), requires_grad, attrs)
        self.nodes.append(node)
        return node

    def input(self, name: str, shape: Sequence[int | None], requires_grad: bool = False) -> Node:
        if name in self.inputs:
            raise KeyError(f"input {name!r} declared twice")
        node = self._add("input", (), requires_grad, name=name, shape=tuple(shape))
        self.inputs[name] = node.id
        return node

    def param(self, name: str, trainable: bool = True) -> Node:
        if name in self.params:
            node = self.nodes[self.params[name]]
            if node.requires_grad != trainable:
                raise ValueError(f"parameter {name!r} used with conflicting trainable flags")
            return node
        node = self._add("param", (), trainable, name=name)
        self.params[name] = node.id
        return node

    def const(self, value) -> Node:
        return self._add("const", (), False, value=np.asarray(value, dtype=DTYPE))

    def matmul(self, a: Node, b: Node) -> Node:
        return self._add("matmul", (a, b))

    def affine(self, x: Node, w: Node, b: Node) -> Node:
        """``x @ w + b`` as a single node."""
        return self._add("affine", (x, w, b))

    def add(self, a: Node, b: Node) -> Node:
        return self._add("add", (a, b))

    def sub(self, a: Node, b: Node) -> Node:
        return self._add("sub", (a, b))

    def mul(self, a: Node, b: Node) -> Node:
        return self._add("mul", (a, b))

    def scale(self, a: Node, c: float) -> Node:
        return self._add("scale", (a,), c=float(c))

    def square(self, a: Node) -> Node:
        return self._add("square", (a,))

    def exp(self, a: Node) -> Node:
        return self._add("exp", (a,))

    def log(self, a: Node) -> Node:
        return self._add("log", (a,))

    def tanh(self, a: Node) -> Node:
        return self._add("tanh", (a,))

    def mish(self, a: Node) -> Node:
        return self._add("mish", (a,))

    def layer_norm(self, a: Node) -> Node:
        """(a - mean) / sqrt(var + eps) over the last axis, without affine terms."""
        return self._add("layer_norm", (a,))

    def softmax(self, a: Node, group: int | None = None) -> Node:
        """Softmax over the last axis, or over consecutive groups of ``group`` entries."""
        return self._add("softmax", (a,), group=group)

    def log_softmax(self, a: Node, group: int | None = None) -> Node:
        return self._add("log_softmax", (a,), group=group)

    def sum(self, a: Node, axis: int | None = None) -> Node:
        return self._add("sum", (a,), axis=axis)

    def mean(self, a: Node, axis: int | None = None) -> Node:
        return self._add("mean", (a,), axis=axis)

    def concat(self, parts: Sequence[Node]) -> Node:
        """Concatenate along the last axis."""
        return self._add("concat", tuple(parts))

    def stop_gradient(self, a: Node, mask: Node | None = None) -> Node:
        """Identity forward.  Backward: zero adjoint, or adjoint * mask if a mask is given.

        ``mask`` broadcasts against ``a`` (e.g. shape (B, 1) to block whole rows).
        """
        if mask is None:
            return self._add("stop_gradient", (a,), False)
        return self._add("gate_gradient", (a, mask), a.requires_grad)

    def output(self, *nodes: Node) -> None:
        self.outputs.extend(n.id for n in nodes)

    # -- evaluation ----------------------------------------------------------

    def forward(self, params: Mapping[str, np.ndarray], inputs: Mapping[str, np.ndarray]) -> list[np.ndarray]:
        values: list = [None] * len(self.nodes)
        self._aux = {}
        for node in self.nodes:
            try:
                values[node.id] = self._eval(node, values, params, inputs)
            except ShapeError:
                raise
            except (ValueError, KeyError) as exc:
                raise ShapeError(node.id, f"{node.op}: {exc}") from exc
        self._values = values
        return [values[i] for i in self.outputs]

    def _eval(self, node: Node, values, params, inputs):
        op = node.op
        a = values[node.parents[0]] if node.parents else None
        if op == "input":
            name = node.attrs["name"]
            if name not in inputs:
                raise ShapeError(node.id, f"missing input {name!r}")
            x = np.asarray(inputs[name], dtype=DTYPE)
            decl = node.attrs["shape"]
            if x.ndim != len(decl) or any(d is not None and d != s for d, s in zip(decl, x.shape)):
                raise ShapeError(node.id, f"input {name!r} expects shape {decl}, got {x.shape}")
            return x
        if op == "param":
            return params[node.attrs["name"]]
        if op == "const":
            return node.attrs["value"]
        if op == "matmul":
            return a @ values[node.parents[1]]
        if op == "affine":
            return a @ values[node.parents[1]] + values[node.parents[2]]
        if op == "add":
            return a + values[node.parents[1]]
        if op == "sub":
            return a - values[node.parents[1]]
        if op == "mul":
            return a * values[node.parents[1]]
        if op == "scale":
            return a * node.attrs["c"]
        if op == "square":
            return a * a
        if op == "exp":
            return np.exp(a)
        if op == "log":
            return np.log(a)
        if op == "tanh":
            return np.tanh(a)
        if op == "mish":
            y, e, t = _mish_parts(a)
            self._aux[node.id] = (e, t)
            return y
        if op == "layer_norm":
            mu = a.mean(axis=-1, keepdims=True)
            inv = 1.0 / np.sqrt(a.var(axis=-1, keepdims=True) + LAYER_NORM_EPS)
            self._aux[node.id] = (inv,)
            return (a - mu) * inv
        if op == "softmax":
            return softmax(a, node.attrs["group"])
        if op == "log_softmax":
            return log_softmax(a, node.attrs["group"])
        if op == "sum":
            return a.sum(axis=node.attrs["axis"])
        if op == "mean":
            return a.mean(axis=node.attrs["axis"])
        if op == "concat":
            return np.concatenate([values[p] for p in node.parents], axis=-1)
        if op in ("stop_gradient", "gate_gradient"):
            return a
        raise ValueError(f"unknown op {op!r}")

    def value(self, node: Node) -> np.ndarray:
        if self._values is None:
            raise RuntimeError("forward has not been run on this tape")
        return self._values[node.id]

    def backward(self, output_adjoint=1.0, output: int = 0) -> dict[str, np.ndarray]:
        """Gradients of output number ``output`` (default the first), keyed by parameter/input name.

        Only trainable parameters and ``requires_grad`` inputs appear; a leaf
        reachable solely through stop-gradient nodes gets an explicit zero.
        """
        if self._values is None:
            raise RuntimeError("backward called before forward")
        if not self.outputs:
            raise RuntimeError("tape has no outputs")
        values = self._values
        out = self.outputs[output]
        adj: list = [None] * len(self.nodes)
        adj[out] = np.broadcast_to(np.asarray(output_adjoint, dtype=DTYPE), values[out].shape).copy()
        for node in reversed(self.nodes[: out + 1]):
            g = adj[node.id]
            if g is None or not node.requires_grad or not node.parents:
                continue
            for pid, pg in zip(node.parents, self._vjp(node, g, values)):
                if pg is None or not self.nodes[pid].requires_grad:
                    continue
                adj[pid] = pg if adj[pid] is None else adj[pid] + pg
        grads = {}
        for name, nid in list(self.params.items()) + list(self.inputs.items()):
            node = self.nodes[nid]
            if node.requires_grad:
                g = adj[nid]
                grads[name] = np.zeros_like(values[nid]) if g is None else np.asarray(g)
        return grads

    def _vjp(self, node: Node, g: np.ndarray, values) -> tuple:
        op = node.op
        ps = node.parents
        a = values[ps[0]]
        rg = [self.nodes[p].requires_grad for p in ps]
        if op == "matmul":
            b = values[ps[1]]
            return (g @ b.T if rg[0] else None, a.T @ g if rg[1] else None)
        if op == "affine":
            w = values[ps[1]]
            return (
                g @ w.T if rg[0] else None,
                a.T @ g if rg[1] else None,
                _unbroadcast(g, values[ps[2]].shape) if rg[2] else None,
            )
        if op == "add":
            return _unbroadcast(g, a.shape), _unbroadcast(g, values[ps[1]].shape)
        if op == "sub":
            return _unbroadcast(g, a.shape), _unbroadcast(-g, values[ps[1]].shape)
        if op == "mul":
            b = values[ps[1]]
            return (
                _unbroadcast(g * b, a.shape) if rg[0] else None,
                _unbroadcast(g * a, b.shape) if rg[1] else None,
            )
        if op == "scale":
            return (g * node.attrs["c"],)
        if op == "square":
            return (2.0 * a * g,)
        if op == "exp":
            return (g * values[node.id],)
        if op == "log":
            return (g / a,)
        if op == "tanh":
            y = values[node.id]
            return (g * (1.0 - y * y),)
        if op == "mish":
            e, t = self._aux[node.id]
            return (g * (t + a * (1.0 - t * t) * (e / (1.0 + e))),)
        if op == "layer_norm":
            (inv,) = self._aux[node.id]
            y = values[node.id]
            return (inv * (g - g.mean(axis=-1, keepdims=True) - y * (g * y).mean(axis=-1, keepdims=True)),)
        if op == "softmax":
            group = node.attrs["group"]
            y = _grouped(values[node.id], group)
            gg = _grouped(g, group)
            return ((y * (gg - (gg * y).sum(axis=-1, keepdims=True))).reshape(a.shape),)
        if op == "log_softmax":
            group = node.attrs["group"]
            p = _grouped(np.exp(values[node.id]), group)
            gg = _grouped(g, group)
            return ((gg - p * gg.sum(axis=-1, keepdims=True)).reshape(a.shape),)
        if op == "sum" or op == "mean":
            axis = node.attrs["axis"]
            if axis is None:
                full = np.broadcast_to(g, a.shape)
            else:
                full = np.broadcast_to(np.expand_dims(g, axis), a.shape)
            if op == "mean":
                full = full * (values[node.id].size / a.size)
            return (np.array(full),)
        if op == "concat":
            out, start = [], 0
            for p in ps:
                width = values[p].shape[-1]
                out.append(g[..., start : start + width])
                start += width
            return tuple(out)
        if op == "gate_gradient":
            return (_unbroadcast(g * values[ps[1]], a.shape), None)
        if op == "stop_gradient":
            return (None,)
        raise ValueError(f"no vjp for op {op!r}")

    def __len__(self) -> int:
        return len(self.nodes)


# --------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], lr: float, **kw) -> AdamState:
        return cls(
            lr=lr,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **kw,
        )


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], clip_norm: float) -> tuple[dict, float]:
    norm = global_norm(grads)
    if not np.isfinite(norm):
        bad = sorted(k for k, g in grads.items() if not np.all(np.isfinite(g)))
        raise NonFiniteError(f"non-finite gradient in {bad}")
    if clip_norm > 0 and norm > clip_norm:
        factor = clip_norm / norm
        return {k: g * factor for k, g in grads.items()}, norm
    return dict(grads), norm


def adam_step(state: AdamState, params: ParamStore, grads: Mapping[str, np.ndarray], clip_norm: float = 10.0) -> float:
    """One Adam update of ``params`` in place; returns the pre-clip gradient norm.

    ``grads`` may cover a subset of the parameters; missing entries are left
    untouched (their moments are not advanced either).
    """
    clipped, norm = clip_by_global_norm(grads, clip_norm)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in clipped.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p = params[name]
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return norm


def soft_update(target: ParamStore, online: ParamStore, tau: float) -> ParamStore:
    """Polyak averaging in place: target <- tau * target + (1 - tau) * online."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if set(target) != set(online):
        raise KeyError(f"parameter names differ: {sorted(set(target) ^ set(online))}")
    for name in target:
        t = target[name]
        o = online[name]
        if t.shape != o.shape:
            raise ShapeError(-1, f"{name!r}: {t.shape} vs {o.shape}")
        t *= tau
        t += (1.0 - tau) * o
    return target
