"""Adaptable pose regressor: a small tanh MLP mapping features to PoseParams.

All parameters live in one flat float64 vector; per-layer weights and biases
are views into it. That keeps Adam, EMA, snapshots and checkpoints to a
handful of whole-vector operations.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .kinematics import BETA_DIM, BETA_MAX, BETA_MIN, InvalidInputError, PoseParams


class GradientError(FloatingPointError):
    """Loss or gradient became non-finite."""


def output_dim_for(joint_count: int) -> int:
    return 3 * joint_count + BETA_DIM + 3


class RegressorState:
    """Weights of the regressor, stored flat.

    ``dims`` is ``(input_dim, *hidden_dims, output_dim)``; layer ``l`` maps
    ``dims[l] -> dims[l+1]`` with weight shape ``(dims[l], dims[l+1])``.
    """

    def __init__(self, dims, flat=None, joint_count=15):
        self.dims = tuple(int(d) for d in dims)
        self.joint_count = joint_count
        if self.dims[-1] != output_dim_for(joint_count):
            raise InvalidInputError(f"output_dim must be {output_dim_for(joint_count)}")
        n = sum(a * b + b for a, b in zip(self.dims[:-1], self.dims[1:]))
        if flat is None:
            flat = np.zeros(n)
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (n,):
            raise InvalidInputError(f"expected {n} parameters, got {flat.shape}")
        self.flat = flat
        self.layers = []
        o = 0
        for a, b in zip(self.dims[:-1], self.dims[1:]):
            W = flat[o:o + a * b].reshape(a, b)
            o += a * b
            self.layers.append((W, flat[o:o + b]))
            o += b

    @classmethod
    def initialize(cls, input_dim, hidden_dims=(64, 64), joint_count=15, seed=0):
        dims = (input_dim, *hidden_dims, output_dim_for(joint_count))
        state = cls(dims, joint_count=joint_count)
        rng = np.random.default_rng(seed)
        for W, _ in state.layers:
            W[...] = rng.normal(0.0, 1.0 / np.sqrt(W.shape[0]), W.shape)
        return state

    @property
    def input_dim(self):
        return self.dims[0]

    @property
    def hidden_dims(self):
        return self.dims[1:-1]

    @property
    def output_dim(self):
        return self.dims[-1]

    def copy(self) -> "RegressorState":
        return RegressorState(self.dims, self.flat.copy(), self.joint_count)

    def load_flat(self, flat):
        self.flat[...] = flat

    def grad_views(self, grad: np.ndarray):
        """Per-layer (dW, db) views into a flat gradient vector."""
        return RegressorState(self.dims, grad, self.joint_count).layers


# ---------------------------------------------------------------------------
# forward / backward

def _forward(state: RegressorState, X: np.ndarray):
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != state.input_dim:
        raise InvalidInputError(f"expected {state.input_dim} features, got {X.shape[-1]}")
    acts = [X]
    h = X
    for W, b in state.layers[:-1]:
        h = np.tanh(h @ W + b)
        acts.append(h)
    W, b = state.layers[-1]
    return h @ W + b, acts


def _head(raw: np.ndarray, joint_count: int) -> PoseParams:
    n = 3 * joint_count
    batch = raw.shape[:-1]
    theta = raw[..., :n].reshape(batch + (joint_count, 3))
    beta = np.clip(1.0 + raw[..., n:n + BETA_DIM], BETA_MIN, BETA_MAX)
    trans = raw[..., n + BETA_DIM:].copy()
    trans[..., 2] = np.logaddexp(0.0, trans[..., 2])
    return PoseParams(theta, beta, trans)


def _head_vjp(raw: np.ndarray, joint_count: int, g: PoseParams) -> np.ndarray:
    n = 3 * joint_count
    batch = raw.shape[:-1]
    out = np.empty(raw.shape)
    out[..., :n] = g.theta.reshape(batch + (n,))
    b = 1.0 + raw[..., n:n + BETA_DIM]
    out[..., n:n + BETA_DIM] = np.where((b > BETA_MIN) & (b < BETA_MAX), g.beta, 0.0)
    out[..., n + BETA_DIM:] = g.trans
    z = raw[..., -1]
    out[..., -1] *= 0.5 * (1.0 + np.tanh(0.5 * z))  # sigmoid
    return out


def _backward(state: RegressorState, acts, draw: np.ndarray) -> np.ndarray:
    grad = np.empty_like(state.flat)
    views = state.grad_views(grad)
    d = draw
    for l in range(len(state.layers) - 1, -1, -1):
        a = acts[l]
        dW, db = views[l]
        if a.ndim == 1:
            np.outer(a, d, out=dW)
            db[...] = d
        else:
            a2 = a.reshape(-1, a.shape[-1])
            d2 = d.reshape(-1, d.shape[-1])
            np.dot(a2.T, d2, out=dW)
            db[...] = d2.sum(axis=0)
        if l > 0:
            d = (d @ state.layers[l][0].T) * (1.0 - acts[l] ** 2)
    return grad


def predict(state: RegressorState, features: np.ndarray) -> PoseParams:
    raw, _ = _forward(state, features)
    return _head(raw, state.joint_count)


def feature_at_layer(state: RegressorState, features: np.ndarray, layer_index: int = -1) -> np.ndarray:
    """Post-tanh activation of hidden layer ``layer_index`` (negative counts from the last)."""
    n_hidden = len(state.layers) - 1
    if not -n_hidden <= layer_index < n_hidden:
        raise IndexError(f"hidden layer index {layer_index} out of range for {n_hidden} layers")
    _, acts = _forward(state, features)
    return acts[1:][layer_index]


LossFn = Callable[[PoseParams], "tuple[float, PoseParams]"]


@dataclass
class Evaluation:
    """One forward pass kept around so the backward pass can reuse it."""

    params: PoseParams
    raw: np.ndarray
    acts: list

    def hidden(self, layer_index: int = -1) -> np.ndarray:
        return self.acts[1:][layer_index]


def evaluate(state: RegressorState, features: np.ndarray) -> Evaluation:
    raw, acts = _forward(state, features)
    return Evaluation(_head(raw, state.joint_count), raw, acts)


def backprop(state: RegressorState, ev: Evaluation, dparams: PoseParams) -> np.ndarray:
    return _backward(state, ev.acts, _head_vjp(ev.raw, state.joint_count, dparams))


def loss_gradient(state: RegressorState, features: np.ndarray, loss_fn: LossFn,
                  ev: Evaluation | None = None) -> tuple[float, np.ndarray]:
    """Value and exact gradient (flat, aligned with ``state.flat``) of ``loss_fn(predict(features))``.

    ``loss_fn`` receives the predicted PoseParams and must return the scalar
    loss together with its gradient with respect to those params.
    """
    if ev is None:
        ev = evaluate(state, features)
    value, dparams = loss_fn(ev.params)
    if not np.isfinite(value):
        raise GradientError(f"non-finite loss {value}")
    grad = backprop(state, ev, dparams)
    if not np.all(np.isfinite(grad)):
        raise GradientError("non-finite gradient")
    return float(value), grad


# ---------------------------------------------------------------------------
# optimisation state

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    momentum_beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def like(cls, state: RegressorState, learning_rate, momentum_beta1) -> "AdamState":
        return cls(np.zeros_like(state.flat), np.zeros_like(state.flat), 0, learning_rate, momentum_beta1)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step_count, self.learning_rate,
                         self.momentum_beta1, self.beta2, self.epsilon)


def adam_step(state: RegressorState, adam: AdamState, grad: np.ndarray) -> RegressorState:
    """Bias-corrected Adam update, applied in place; returns ``state``."""
    if grad.shape != state.flat.shape or adam.m.shape != state.flat.shape:
        raise InvalidInputError("gradient / moment shape does not match parameters")
    b1, b2 = adam.momentum_beta1, adam.beta2
    adam.step_count += 1
    t = adam.step_count
    adam.m *= b1
    adam.m += (1.0 - b1) * grad
    adam.v *= b2
    adam.v += (1.0 - b2) * grad * grad
    step = adam.learning_rate / (1.0 - b1 ** t)
    denom = np.sqrt(adam.v / (1.0 - b2 ** t))
    denom += adam.epsilon
    state.flat -= step * adam.m / denom
    return state


@dataclass
class TeacherState:
    flat: np.ndarray
    ema_decay: float = 0.99

    @classmethod
    def from_student(cls, student: RegressorState, ema_decay=0.99) -> "TeacherState":
        return cls(student.flat.copy(), ema_decay)

    def as_regressor(self, like: RegressorState) -> RegressorState:
        return RegressorState(like.dims, self.flat, like.joint_count)


def ema_update(teacher: TeacherState, student: RegressorState) -> TeacherState:
    if teacher.flat.shape != student.flat.shape:
        raise InvalidInputError("teacher and student shapes differ")
    teacher.flat *= teacher.ema_decay
    teacher.flat += (1.0 - teacher.ema_decay) * student.flat
    return teacher


@dataclass(frozen=True)
class Snapshot:
    dims: tuple
    joint_count: int
    flat: np.ndarray
    adam: AdamState | None

    def __eq__(self, other):
        if not isinstance(other, Snapshot):
            return NotImplemented
        same_adam = (self.adam is None) == (other.adam is None)
        if same_adam and self.adam is not None:
            same_adam = (self.adam.step_count == other.adam.step_count
                         and np.array_equal(self.adam.m, other.adam.m)
                         and np.array_equal(self.adam.v, other.adam.v))
        return self.dims == other.dims and np.array_equal(self.flat, other.flat) and same_adam

    def tobytes(self) -> bytes:
        parts = [self.flat.tobytes()]
        if self.adam is not None:
            parts += [self.adam.m.tobytes(), self.adam.v.tobytes(), struct.pack("<q", self.adam.step_count)]
        return b"".join(parts)


def snapshot(state: RegressorState, adam: AdamState | None = None) -> Snapshot:
    flat = state.flat.copy()
    flat.flags.writeable = False
    return Snapshot(state.dims, state.joint_count, flat, adam.copy() if adam is not None else None)


def restore(snap: Snapshot) -> tuple[RegressorState, AdamState | None]:
    state = RegressorState(snap.dims, snap.flat.copy(), snap.joint_count)
    return state, (snap.adam.copy() if snap.adam is not None else None)


# ---------------------------------------------------------------------------
# checkpoints: little-endian header then float64 parameters in layer order

_MAGIC = b"PTTA"


def save_checkpoint(path, state: RegressorState) -> None:
    header = _MAGIC + struct.pack("<ii", state.joint_count, len(state.dims))
    header += struct.pack(f"<{len(state.dims)}i", *state.dims)
    Path(path).write_bytes(header + state.flat.astype("<f8").tobytes())


def load_checkpoint(path) -> RegressorState:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a regressor checkpoint")
    J, nd = struct.unpack_from("<ii", data, 4)
    dims = struct.unpack_from(f"<{nd}i", data, 12)
    flat = np.frombuffer(data, dtype="<f8", offset=12 + 4 * nd).astype(float)
    return RegressorState(dims, flat, J)
