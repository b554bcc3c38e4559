"""Define-by-run reverse-mode autodiff over dense float64 arrays, plus an MLP and SGD.

A :class:`Tape` is rebuilt for every forward pass. Each op appends a node holding
its payload, the indices of its parents and a vector-Jacobian closure; the
backward sweep walks the nodes in reverse and accumulates gradients into the
parents. Parameters enter the tape through :meth:`Tape.param`, which remembers
the array the node was read from so that gradients of a parameter used several
times (one forward per source domain) are summed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from dtcs.rng import stream

CHECKPOINT_FORMAT = "dtcs-mlp"
CHECKPOINT_VERSION = 1


class Node:
    __slots__ = ("tape", "index", "value", "grad", "op", "parents", "vjp", "source")

    def __init__(self, tape, index, value, op, parents, vjp, source):
        self.tape = tape
        self.index = index
        self.value = value
        self.grad = None
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.source = source

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(#{self.index} {self.op} shape={self.value.shape})"


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Ordered list of value-graph nodes; parents always precede children."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, value, op, parents=(), vjp=None, source=None) -> Node:
        for p in parents:
            if p.tape is not self:
                raise ValueError("operand belongs to a different tape")
        if type(value) is not np.ndarray or value.dtype != np.float64:
            value = np.asarray(value, dtype=np.float64)
        node = Node(self, len(self.nodes), value, op, tuple(p.index for p in parents), vjp, source)
        self.nodes.append(node)
        return node

    # leaves -------------------------------------------------------------

    def const(self, value) -> Node:
        return self._push(np.array(value, dtype=np.float64), "const")

    def param(self, array: np.ndarray) -> Node:
        """Read a parameter array; the node's gradient is reported against ``array``."""
        return self._push(array, "param", source=array)

    # ops ----------------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        return self._push(av @ bv, "matmul", (a, b),
                          lambda g: (g @ bv.T, av.T @ g))

    def add(self, a: Node, b: Node) -> Node:
        sa, sb = a.shape, b.shape
        return self._push(a.value + b.value, "add", (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def mul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        return self._push(av * bv, "mul", (a, b),
                          lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._push(a.value * c, "scale", (a,), lambda g: (g * c,))

    def relu(self, a: Node) -> Node:
        # subgradient at exactly 0 is 0
        mask = a.value > 0.0
        return self._push(np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))

    def exp(self, a: Node) -> Node:
        out = np.exp(a.value)
        return self._push(out, "exp", (a,), lambda g: (g * out,))

    def log_softmax(self, a: Node, tau: float = 1.0, floor: float | None = None) -> Node:
        """Row-wise ``log(softmax(a / tau))``; with ``floor`` the probabilities are
        clamped from below before the log and clamped entries pass no gradient."""
        z = a.value / tau
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        if floor is None:
            out = z - np.log(e.sum(axis=-1, keepdims=True))
            live = None
        else:
            live = p > floor
            out = np.log(np.maximum(p, floor))

        def vjp(g):
            if live is not None:
                g = g * live
            return ((g - p * g.sum(axis=-1, keepdims=True)) / tau,)

        return self._push(out, "log_softmax", (a,), vjp)

    def pick(self, a: Node, index: np.ndarray) -> Node:
        """``a[r, index[r]]`` for every row ``r``."""
        index = np.asarray(index, dtype=np.intp)
        rows = np.arange(a.shape[0])
        shape = a.shape

        def vjp(g):
            out = np.zeros(shape)
            out[rows, index] = g
            return (out,)

        return self._push(a.value[rows, index], "pick", (a,), vjp)

    def rows(self, a: Node, start: int, stop: int) -> Node:
        """Rows ``start:stop`` of a matrix node."""
        shape = a.shape

        def vjp(g):
            out = np.zeros(shape)
            out[start:stop] = g
            return (out,)

        return self._push(a.value[start:stop], "rows", (a,), vjp)

    def sum(self, a: Node, axis: int | None = None) -> Node:
        shape = a.shape
        if axis is None:
            return self._push(a.value.sum(), "sum", (a,),
                              lambda g: (np.broadcast_to(g, shape).copy(),))
        return self._push(a.value.sum(axis=axis), "sum", (a,),
                          lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))

    def mean(self, a: Node) -> Node:
        shape, n = a.shape, a.value.size
        return self._push(a.value.mean(), "mean", (a,),
                          lambda g: (np.full(shape, g / n),))


def backward(tape: Tape, loss: Node) -> dict[int, np.ndarray]:
    """Reverse sweep from ``loss``.

    Returns gradients keyed by ``id(parameter array)``; a parameter read several
    times gets the sum of its uses. Can be called repeatedly on one tape with
    different roots.
    """
    if loss.tape is not tape or loss.index >= len(tape.nodes) or tape.nodes[loss.index] is not loss:
        raise ValueError("loss node does not belong to this tape")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    nodes = tape.nodes
    for node in nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(nodes[: loss.index + 1]):
        if node.grad is None or node.vjp is None:
            continue
        for pi, pg in zip(node.parents, node.vjp(node.grad)):
            parent = nodes[pi]
            parent.grad = pg if parent.grad is None else parent.grad + pg
    grads: dict[int, np.ndarray] = {}
    for node in nodes:
        if node.source is None:
            continue
        if node.grad is None:
            node.grad = np.zeros_like(node.value)
        key = id(node.source)
        grads[key] = node.grad if key not in grads else grads[key] + node.grad
    return grads


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


@dataclass
class MlpModel:
    """Affine layers with ReLU between them and identity on the output.

    ``weights[k]`` has shape ``(dims[k], dims[k+1])``; a model with
    ``len(dims) == 2`` is a single linear head.
    """

    dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) < 2 or any(d <= 0 for d in self.dims):
            raise ValueError(f"invalid layer dims {self.dims}")
        if len(self.weights) != len(self.dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and bias per layer required")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.dims[k], self.dims[k + 1]) or b.shape != (self.dims[k + 1],):
                raise ValueError(
                    f"layer {k}: expected W{(self.dims[k], self.dims[k + 1])} b{(self.dims[k + 1],)}, "
                    f"got W{w.shape} b{b.shape}")

    @classmethod
    def init(cls, dims: Sequence[int], seed: int, key: int | str = "model") -> "MlpModel":
        """Glorot-uniform weights and zero biases, one keyed stream per layer."""
        dims = tuple(int(d) for d in dims)
        weights, biases = [], []
        for k in range(len(dims) - 1):
            d_in, d_out = dims[k], dims[k + 1]
            limit = np.sqrt(6.0 / (d_in + d_out))
            rng = stream(seed, "init", key, k)
            weights.append(rng.uniform(-limit, limit, size=(d_in, d_out)))
            biases.append(np.zeros(d_out))
        return cls(dims, weights, biases)

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> "MlpModel":
        dims = tuple(int(d) for d in dims)
        return cls(dims, [np.zeros((dims[k], dims[k + 1])) for k in range(len(dims) - 1)],
                   [np.zeros(dims[k + 1]) for k in range(len(dims) - 1)])

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def num_params(self) -> int:
        return sum(self.dims[k] * self.dims[k + 1] + self.dims[k + 1] for k in range(len(self.dims) - 1))

    @property
    def num_classes(self) -> int:
        return self.dims[-1]

    def copy(self) -> "MlpModel":
        return MlpModel(self.dims, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def with_params(self, params: Sequence[np.ndarray]) -> "MlpModel":
        params = list(params)
        return MlpModel(self.dims, params[0::2], params[1::2])

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def unflatten(self, vector: np.ndarray) -> "MlpModel":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got {vector.shape}")
        out, at = [], 0
        for p in self.params:
            out.append(vector[at: at + p.size].reshape(p.shape).copy())
            at += p.size
        return self.with_params(out)

    def equals(self, other: "MlpModel") -> bool:
        """Bitwise equality of architecture and parameters."""
        return self.dims == other.dims and all(
            np.array_equal(a, b) for a, b in zip(self.params, other.params))

    def features(self, x: np.ndarray) -> np.ndarray:
        """Input of the last layer, without building a tape."""
        h = self._check_input(x)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
        return h

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Logits without building a tape (evaluation, prophets)."""
        return self.features(x) @ self.weights[-1] + self.biases[-1]

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dims[0]:
            raise ValueError(f"input shape {x.shape} incompatible with model dims {self.dims} "
                             f"(expected [batch x {self.dims[0]}])")
        return x


def forward(model: MlpModel, inputs, tape: Tape | None = None) -> tuple[Node, Tape]:
    """Record ``model(inputs)`` on ``tape`` (a new one if omitted)."""
    logits, _, tape = forward_with_features(model, inputs, tape)
    return logits, tape


def forward_with_features(model: MlpModel, inputs, tape: Tape | None = None) -> tuple[Node, Node, Tape]:
    """Like :func:`forward` but also returns the last-layer input node.

    ``inputs`` may be an array or a node already on ``tape``.
    """
    tape = Tape() if tape is None else tape
    if isinstance(inputs, Node):
        if inputs.value.ndim != 2 or inputs.shape[1] != model.dims[0]:
            raise ValueError(f"input shape {inputs.shape} incompatible with model dims {model.dims}")
        h = inputs
    else:
        h = tape.const(model._check_input(inputs))
    n_layers = len(model.weights)
    features = h
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        if k == n_layers - 1:
            features = h
        h = tape.add(tape.matmul(h, tape.param(w)), tape.param(b))
        if k < n_layers - 1:
            h = tape.relu(h)
    return h, features, tape


def grads_for(model: MlpModel, grads: dict[int, np.ndarray]) -> list[np.ndarray]:
    """Gradients aligned with ``model.params``; zeros for unused parameters."""
    return [grads[id(p)] if id(p) in grads else np.zeros_like(p) for p in model.params]


# ---------------------------------------------------------------------------
# SGD
# ---------------------------------------------------------------------------


@dataclass
class SgdOptimizer:
    lr: float = 5e-3
    weight_decay: float = 5e-4
    milestones: tuple[float, ...] = (0.6, 0.8)
    decay_factor: float = 0.1

    def __post_init__(self) -> None:
        self.milestones = tuple(float(m) for m in self.milestones)
        # lr == 0 is a frozen optimizer; the schedule itself never reaches zero
        if not self.lr >= 0:
            raise ValueError(f"learning rate must be nonnegative, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be nonnegative, got {self.weight_decay}")
        if not self.decay_factor > 0:
            raise ValueError(f"decay factor must be positive, got {self.decay_factor}")
        if any(not 0.0 < m < 1.0 for m in self.milestones) or any(
                a >= b for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing in (0, 1), got {self.milestones}")

    def lr_at(self, step: int, total: int) -> float:
        return self.lr * milestone_factor(step, total, self.milestones, self.decay_factor)


def milestone_factor(step: int, total: int, milestones: Sequence[float], factor: float) -> float:
    """``factor ** k`` where ``k`` counts milestones already reached at ``step``."""
    if total <= 0:
        return 1.0
    out = 1.0
    for m in milestones:
        # integer comparison avoids 0.6 * 3000 rounding surprises
        if step * 10**9 >= round(m * 10**9) * total:
            out *= factor
    return out


def sgd_step(model: MlpModel, grads: Sequence[np.ndarray], optimizer: SgdOptimizer,
             step: int, total: int) -> MlpModel:
    """``theta - lr_eff * (g + weight_decay * theta)``; returns a new model."""
    params = model.params
    if len(grads) != len(params):
        raise ValueError(f"expected {len(params)} gradient arrays, got {len(grads)}")
    lr = optimizer.lr_at(step, total)
    wd = optimizer.weight_decay
    out = []
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        out.append(p - lr * (g + wd * p) if wd else p - lr * g)
    return model.with_params(out)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_dict(model: MlpModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": list(model.dims),
        # float repr is the shortest string that round-trips exactly
        "params": [float(v) for v in model.flat()],
    }


def model_from_checkpoint(record: dict) -> MlpModel:
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint")
    if record.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {record.get('version')}")
    return MlpModel.zeros(record["dims"]).unflatten(np.array(record["params"], dtype=np.float64))


def save_checkpoint(model: MlpModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model)))


def load_checkpoint(path: str | Path) -> MlpModel:
    return model_from_checkpoint(json.loads(Path(path).read_text()))
