"""Small fully connected network used for the feature basis.

Layer ``i`` computes ``a_{i+1} = act_i(W_i' a_i + b_i)`` with ``W_i`` of
shape ``(n_in, n_out)``. The final layer is the linear regression head; the
activations feeding it (plus a constant 1) form the feature vector ``phi``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from deepmpc.errors import DimensionError, InvalidInputError, TrainingDivergedError

ACTIVATIONS = ("identity", "relu", "tanh")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(float)
    if name == "tanh":
        return 1.0 - a ** 2
    return np.ones_like(z)


@dataclass
class MlpNetwork:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        n = len(self.layer_sizes) - 1
        if n < 1 or len(self.weights) != n or len(self.biases) != n or len(self.activations) != n:
            raise DimensionError("layer lists have inconsistent lengths")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if W.shape != shape or b.shape != (shape[1],):
                raise DimensionError(f"layer {i} has shape {W.shape}, expected {shape}")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise InvalidInputError(f"unknown activation {a!r}")

    @classmethod
    def initialize(cls, layer_sizes: Sequence[int], activations: Sequence[str],
                   rng: np.random.Generator) -> "MlpNetwork":
        """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` init for weights and biases."""
        weights, biases = [], []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            lim = 1.0 / np.sqrt(n_in)
            weights.append(rng.uniform(-lim, lim, size=(n_in, n_out)))
            biases.append(rng.uniform(-lim, lim, size=n_out))
        return cls(list(layer_sizes), weights, biases, list(activations))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_features(self) -> int:
        return self.layer_sizes[-2] + 1

    def copy(self) -> "MlpNetwork":
        return MlpNetwork(list(self.layer_sizes), [W.copy() for W in self.weights],
                          [b.copy() for b in self.biases], list(self.activations))

    def parameters(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def feature_sigma(self) -> float:
        """Norm bound on :func:`features` implied by the last hidden activation."""
        if self.activations[-2] != "tanh":
            return float("inf")
        return float(np.sqrt(self.n_features))


def _forward_batch(net: MlpNetwork, X: np.ndarray):
    a = X
    pre, acts = [], [a]
    for W, b, name in zip(net.weights, net.biases, net.activations):
        z = a @ W + b
        a = _act(name, z)
        pre.append(z)
        acts.append(a)
    return pre, acts


def forward(net: MlpNetwork, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Evaluate the network at one input; returns output and all layer activations."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != net.layer_sizes[0]:
        raise DimensionError(f"input has size {x.size}, expected {net.layer_sizes[0]}")
    _, acts = _forward_batch(net, x[None, :])
    acts = [a[0] for a in acts]
    return acts[-1], acts


def features(net: MlpNetwork, x) -> np.ndarray:
    """Last hidden layer activation with a trailing constant 1."""
    if net.n_layers < 2:
        raise DimensionError("features need at least one hidden layer")
    a = np.asarray(x, dtype=float).reshape(1, -1)
    for W, b, name in zip(net.weights[:-1], net.biases[:-1], net.activations[:-1]):
        a = _act(name, a @ W + b)
    return np.append(a[0], 1.0)


def feature_evaluator(net: MlpNetwork) -> Callable[[np.ndarray], np.ndarray]:
    """Closure over a frozen copy of the inner layers."""
    frozen = net.copy()
    return lambda x: features(frozen, x)


def mse_loss(net: MlpNetwork, X, Y) -> float:
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
    _, acts = _forward_batch(net, X)
    return float(np.mean(np.sum((acts[-1] - Y) ** 2, axis=1)))


def backprop(net: MlpNetwork, batch) -> list[np.ndarray]:
    """Gradients of ``mean ||net(x) - target||^2`` over the batch.

    ``batch`` is either ``(X, Y)`` arrays or a sequence of ``(x, target)``
    pairs. Returns ``[dW_0, db_0, dW_1, db_1, ...]`` matching
    :meth:`MlpNetwork.parameters`.
    """
    X, Y = _as_arrays(batch)
    if X.shape[0] == 0:
        raise InvalidInputError("empty batch")
    n = X.shape[0]
    pre, acts = _forward_batch(net, X)
    delta = 2.0 * (acts[-1] - Y) / n
    grads: list[np.ndarray] = [None] * (2 * net.n_layers)
    for i in reversed(range(net.n_layers)):
        delta = delta * _act_grad(net.activations[i], pre[i], acts[i + 1])
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        delta = delta @ net.weights[i].T
    return grads


def _as_arrays(batch):
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray) \
            and batch[0].ndim == 2:
        X, Y = batch
    else:
        pairs = list(batch)
        if not pairs:
            return np.zeros((0, 0)), np.zeros((0, 0))
        X = np.array([np.asarray(p[0], dtype=float).reshape(-1) for p in pairs])
        Y = np.array([np.asarray(p[1], dtype=float).reshape(-1) for p in pairs])
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
    return X, Y


@dataclass
class TrainerState:
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 50
    velocity: list[np.ndarray] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInputError("momentum must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise InvalidInputError("learning rate must be positive")


def minibatches(X: np.ndarray, Y: np.ndarray, batch_size: int,
                rng: np.random.Generator) -> Callable[[int], Iterable[tuple]]:
    """Batch source that reshuffles ``(X, Y)`` every epoch."""
    def source(epoch: int):
        order = rng.permutation(X.shape[0])
        for start in range(0, X.shape[0], batch_size):
            idx = order[start:start + batch_size]
            yield X[idx], Y[idx]
    return source


def train(net: MlpNetwork, trainer: TrainerState,
          batch_source: Callable[[int], Iterable[tuple]]) -> MlpNetwork:
    """SGD with heavy-ball momentum; returns a trained copy of ``net``.

    ``trainer.epoch_losses`` receives the mean batch loss of every epoch.
    """
    net = net.copy()
    params = net.parameters()
    if len(trainer.velocity) != len(params):
        trainer.velocity = [np.zeros_like(p) for p in params]
    for epoch in range(trainer.epochs):
        losses = []
        for batch in batch_source(epoch):
            X, Y = _as_arrays(batch)
            with np.errstate(over="ignore", invalid="ignore"):
                loss = mse_loss(net, X, Y)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} (last finite: "
                    f"{trainer.epoch_losses[-1] if trainer.epoch_losses else 'none'})")
            losses.append(loss)
            grads = backprop(net, (X, Y))
            for p, v, g in zip(params, trainer.velocity, grads):
                v *= trainer.momentum
                v -= trainer.learning_rate * g
                p += v
        if losses:
            trainer.epoch_losses.append(float(np.mean(losses)))
    return net


_MAGIC = b"DMPCNET1"


def save_checkpoint(net: MlpNetwork, path) -> None:
    """Binary layout: magic, layer count, sizes, activation codes, then
    row-major little-endian float64 weights and biases per layer."""
    out = bytearray(_MAGIC)
    out += struct.pack("<I", len(net.layer_sizes))
    out += struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes)
    out += bytes(ACTIVATIONS.index(a) for a in net.activations)
    for W, b in zip(net.weights, net.biases):
        out += np.ascontiguousarray(W, dtype="<f8").tobytes()
        out += np.ascontiguousarray(b, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> MlpNetwork:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise InvalidInputError(f"{path}: not a network checkpoint")
    pos = len(_MAGIC)
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    sizes = list(struct.unpack_from(f"<{n}I", data, pos))
    pos += 4 * n
    acts = [ACTIVATIONS[c] for c in data[pos:pos + n - 1]]
    pos += n - 1
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        W = np.frombuffer(data, dtype="<f8", count=n_in * n_out, offset=pos).reshape(n_in, n_out)
        pos += 8 * n_in * n_out
        b = np.frombuffer(data, dtype="<f8", count=n_out, offset=pos)
        pos += 8 * n_out
        weights.append(W.astype(float))
        biases.append(b.astype(float))
    return MlpNetwork(sizes, weights, biases, acts)
