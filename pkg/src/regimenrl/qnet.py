"""Dense feed-forward Q-network written directly in numpy.

ReLU hidden layers, each followed by inverted dropout, and a linear output
layer with one unit per action. Everything is float64.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ModelFormatError,
    ModelShapeError,
    ModelTruncatedError,
    ModelVersionError,
    ShapeError,
)

HIDDEN_SIZES = (256, 512, 256)
DROPOUT_RATE = 0.5


@dataclass
class QNetworkParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"
    dropout: float = DROPOUT_RATE
    feature_stats: dict | None = None
    vocabulary: dict | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_actions(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "QNetworkParams":
        return QNetworkParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.dropout,
            self.feature_stats,
            self.vocabulary,
            dict(self.metadata),
        )

    def arrays(self) -> list[np.ndarray]:
        """Parameters in layer order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def check(self) -> None:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: bias shape {b.shape} vs weight {w.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i}: input {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")


def init(input_dim: int, n_actions: int, seed: int = 0, hidden: Sequence[int] = HIDDEN_SIZES,
         dropout: float = DROPOUT_RATE) -> QNetworkParams:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    if input_dim < 1 or n_actions < 1:
        raise ValueError("input_dim and n_actions must be >= 1")
    rng = np.random.default_rng(seed)
    sizes = [input_dim, *hidden, n_actions]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return QNetworkParams(weights, biases, dropout=dropout)


def dropout_masks(params: QNetworkParams, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Inverted-dropout masks (0 or 1/keep) for every hidden layer."""
    keep = 1.0 - params.dropout
    return [
        (rng.random((batch, w.shape[1])) < keep) / keep
        for w in params.weights[:-1]
    ]


def _as_batch(params: QNetworkParams, states) -> tuple[np.ndarray, bool]:
    x = np.asarray(states, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"state dimension {x.shape[-1]} does not match network input {params.input_dim}")
    return x, single


def _forward(params: QNetworkParams, x: np.ndarray, masks: list[np.ndarray] | None):
    """Return (q, activations). activations[i] is the input to layer i."""
    acts = [x]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if i == last:
            return z, acts
        h = np.maximum(z, 0.0)
        if masks is not None:
            h = h * masks[i]
        acts.append(h)
    raise AssertionError("unreachable")


def forward(params: QNetworkParams, states, mode: str = "eval", mask_seed=None) -> np.ndarray:
    """Q-values for one state (shape ``(A,)``) or a batch (``(n, A)``).

    ``mode="train"`` applies dropout with masks drawn from ``mask_seed`` (an
    int or a numpy Generator); ``mode="eval"`` uses no dropout.
    """
    x, single = _as_batch(params, states)
    if mode == "eval":
        masks = None
    elif mode == "train":
        rng = mask_seed if isinstance(mask_seed, np.random.Generator) else np.random.default_rng(mask_seed)
        masks = dropout_masks(params, x.shape[0], rng)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    q, _ = _forward(params, x, masks)
    return q[0] if single else q


def td_targets(target_params: QNetworkParams, rewards, next_states, terminal, gamma: float) -> np.ndarray:
    """r + gamma * max_a' Q(s', a'; target), or just r on terminal tuples."""
    rewards = np.asarray(rewards, dtype=float)
    q_next = forward(target_params, np.asarray(next_states, dtype=float).reshape(len(rewards), -1))
    boot = np.where(np.asarray(terminal, dtype=bool), 0.0, q_next.max(axis=1))
    return rewards + gamma * boot


def td_loss(params: QNetworkParams, target_params: QNetworkParams, batch, gamma: float,
            masks: list[np.ndarray] | None = None) -> tuple[float, np.ndarray]:
    """Mean squared TD error over ``batch`` and the (fixed) per-example targets."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    targets = td_targets(target_params, batch.rewards, batch.next_states, batch.terminal, gamma)
    q, _ = _forward(params, _as_batch(params, batch.states)[0], masks)
    pred = q[np.arange(len(targets)), batch.actions]
    return float(np.mean((pred - targets) ** 2)), targets


def backward(params: QNetworkParams, batch, targets: np.ndarray,
             masks: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """Gradient of mean((Q(s,a) - target)^2) in the layout of ``params.arrays()``."""
    grads, _ = loss_and_grad(params, batch.states, batch.actions, targets, masks)
    return grads


def loss_and_grad(params, states, actions, targets, masks):
    x, _ = _as_batch(params, states)
    n = x.shape[0]
    q, acts = _forward(params, x, masks)
    rows = np.arange(n)
    err = q[rows, actions] - targets
    dq = np.zeros_like(q)
    dq[rows, actions] = 2.0 * err / n
    grads: list[np.ndarray] = [None] * (2 * len(params.weights))
    delta = dq
    for i in range(len(params.weights) - 1, -1, -1):
        a = acts[i]
        grads[2 * i] = a.T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i:
            da = delta @ params.weights[i].T
            # Through dropout (a = relu(z) * mask) and the ReLU.
            if masks is not None:
                da = da * masks[i - 1]
            delta = da * (a > 0)
    return grads, float(np.mean(err ** 2))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: QNetworkParams, **hyper) -> "AdamState":
        arrs = params.arrays()
        return cls([np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs], **hyper)


def adam_step(params: QNetworkParams, grads: list[np.ndarray], state: AdamState) -> tuple[QNetworkParams, AdamState]:
    """One bias-corrected Adam update, applied in place and returned."""
    arrs = params.arrays()
    if len(grads) != len(arrs) or any(g.shape != a.shape for g, a in zip(grads, arrs)):
        raise ShapeError("gradient does not match parameter shapes")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for a, g, m, v in zip(arrs, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        a -= state.alpha * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------- model file
#
# Layout (little-endian):
#   magic b"RXQN" | u16 version | u32 metadata length | metadata (UTF-8 JSON)
#   u32 layer count, then per layer: u32 rows, u32 cols, rows*cols f64, cols f64

MAGIC = b"RXQN"
FORMAT_VERSION = 1


def save(params: QNetworkParams, path) -> None:
    meta = {
        "layer_sizes": params.layer_sizes,
        "activation": params.activation,
        "dropout": params.dropout,
        "feature_stats": params.feature_stats,
        "vocabulary": params.vocabulary,
        "metadata": params.metadata,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(blob)), blob, struct.pack("<I", len(params.weights))]
    for w, b in zip(params.weights, params.biases):
        parts.append(struct.pack("<II", *w.shape))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelTruncatedError(f"file ends inside {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def load(path) -> QNetworkParams:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic header") != MAGIC:
        raise ModelFormatError("not a Q-network model file (bad magic bytes)")
    version, meta_len = struct.unpack("<HI", r.take(6, "header"))
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"unsupported model file version {version}")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupt metadata block: {exc}") from None
    (n_layers,) = struct.unpack("<I", r.take(4, "layer count"))
    sizes = meta["layer_sizes"]
    if n_layers != len(sizes) - 1:
        raise ModelShapeError(f"{n_layers} layers stored but metadata lists sizes {sizes}")
    weights, biases = [], []
    for i in range(n_layers):
        rows, cols = struct.unpack("<II", r.take(8, f"layer {i} shape"))
        if (rows, cols) != (sizes[i], sizes[i + 1]):
            raise ModelShapeError(f"layer {i} has shape {(rows, cols)}, expected {(sizes[i], sizes[i + 1])}")
        w = np.frombuffer(r.take(8 * rows * cols, f"layer {i} weights"), dtype="<f8").reshape(rows, cols)
        b = np.frombuffer(r.take(8 * cols, f"layer {i} bias"), dtype="<f8")
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if r.pos != len(r.data):
        raise ModelFormatError(f"{len(r.data) - r.pos} trailing bytes after parameter blocks")
    return QNetworkParams(
        weights, biases, meta["activation"], meta["dropout"],
        meta["feature_stats"], meta["vocabulary"], meta["metadata"],
    )
