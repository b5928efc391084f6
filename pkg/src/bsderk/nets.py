"""Small fully-connected tanh networks with exact reverse-mode gradients.

The architecture is fixed to the shape the stage regressions need: two tanh
hidden layers of equal width and an affine output layer whose leading
component is the scalar value head, followed by one (and optionally two)
vector heads.  Gradients are hand derived for this fixed architecture; the
losses only have to supply the derivative of the objective with respect to
the raw network output.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class NetError(ValueError):
    """Invalid network configuration."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the first offending sample index."""

    def __init__(self, message: str, sample_index: Optional[int] = None):
        super().__init__(message)
        self.sample_index = sample_index


def param_count(dims) -> int:
    """Total parameter count: each layer has ``m_l * (m_{l-1} + 1)`` entries."""
    return int(sum(dims[i + 1] * (dims[i] + 1) for i in range(len(dims) - 1)))


class MLP:
    """Feedforward network ``x -> affine -> tanh -> affine -> tanh -> affine``.

    An optional fixed input standardization ``(x - center) / scale`` is
    applied before the first layer; it carries no trainable parameters.
    """

    def __init__(self, weights, biases, seed=None, input_center=None,
                 input_scale=None):
        self.weights = weights  # list of (fan_in, fan_out) arrays
        self.biases = biases
        self.seed = seed
        self.input_center = input_center
        self.input_scale = input_scale

    @property
    def dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def d_out(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def n_params(self) -> int:
        return param_count(self.dims)

    def forward(self, x):
        """Returns the raw output and the activation cache for backprop."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise NetError(f"expected input (B, {self.d_in}), got {x.shape}")
        if self.input_center is not None:
            x = (x - self.input_center) / self.input_scale
        acts = [x]
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w + b)
            acts.append(h)
        out = h @ self.weights[-1] + self.biases[-1]
        return out, acts

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, acts, dout):
        """Gradient of the (already batch-reduced) objective w.r.t. parameters."""
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        delta = dout
        for layer in range(len(self.weights) - 1, -1, -1):
            grads_w[layer] = acts[layer].T @ delta
            grads_b[layer] = delta.sum(axis=0)
            if layer > 0:
                # tanh'(z) = 1 - tanh(z)^2, expressed via the stored activation
                delta = (delta @ self.weights[layer].T) * (1.0 - acts[layer] ** 2)
        return grads_w, grads_b

    def copy(self) -> "MLP":
        return MLP(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            seed=self.seed,
            input_center=None if self.input_center is None else self.input_center.copy(),
            input_scale=None if self.input_scale is None else self.input_scale.copy(),
        )

    def pack(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def unpack(self, theta: np.ndarray) -> None:
        pos = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = theta[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = theta[pos:pos + b.size].copy()
            pos += b.size
        if pos != theta.size:
            raise NetError(f"theta has {theta.size} entries, expected {pos}")


def init_mlp(d_in: int, d_out: int, width: int, seed, n_hidden: int = 2,
             input_center=None, input_scale=None) -> MLP:
    """Symmetric scaled-uniform (fan-in/fan-out) weights, zero biases."""
    if min(d_in, d_out, width) < 1:
        raise NetError("all dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    dims = [d_in] + [width] * n_hidden + [d_out]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MLP(weights, biases, seed=seed, input_center=input_center,
               input_scale=input_scale)


def split_heads(out: np.ndarray, dim: int):
    """Split raw output into (value, gradient[, correction]) heads."""
    d1 = out.shape[1]
    if d1 == 1 + dim:
        return out[:, 0], out[:, 1:1 + dim], None
    if d1 == 1 + 2 * dim:
        return out[:, 0], out[:, 1:1 + dim], out[:, 1 + dim:1 + 2 * dim]
    raise NetError(f"output dim {d1} is neither 1+{dim} nor 1+2*{dim}")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m_w: list = field(default_factory=list)
    v_w: list = field(default_factory=list)
    m_b: list = field(default_factory=list)
    v_b: list = field(default_factory=list)

    @staticmethod
    def for_net(net: MLP, lr: float) -> "AdamState":
        st = AdamState(lr=lr)
        st.m_w = [np.zeros_like(w) for w in net.weights]
        st.v_w = [np.zeros_like(w) for w in net.weights]
        st.m_b = [np.zeros_like(b) for b in net.biases]
        st.v_b = [np.zeros_like(b) for b in net.biases]
        return st


def adam_step(state: AdamState, net: MLP, grads_w, grads_b) -> None:
    """Standard bias-corrected moment update at the state's current rate."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    scale = state.lr * np.sqrt(corr2) / corr1
    for i, g in enumerate(grads_w):
        state.m_w[i] = b1 * state.m_w[i] + (1 - b1) * g
        state.v_w[i] = b2 * state.v_w[i] + (1 - b2) * g * g
        net.weights[i] -= scale * state.m_w[i] / (np.sqrt(state.v_w[i]) + state.eps)
    for i, g in enumerate(grads_b):
        state.m_b[i] = b1 * state.m_b[i] + (1 - b1) * g
        state.v_b[i] = b2 * state.v_b[i] + (1 - b2) * g * g
        net.biases[i] -= scale * state.m_b[i] / (np.sqrt(state.v_b[i]) + state.eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainSchedule:
    """Adaptive rate ladder: halve on stagnation, stop below a floor rate."""

    batch_size: int
    initial_lr: float = 1e-2
    stop_lr: float = 1e-9
    check_every: int = 50
    decay: float = 0.5
    decay_threshold: float = 0.05  # relative test-loss improvement trigger
    max_epochs: int = 200_000  # safety cap, not part of the protocol

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise NetError(f"decay must lie in (0, 1), got {self.decay}")
        if self.stop_lr > self.initial_lr:
            raise NetError("stop_lr must not exceed initial_lr")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (epoch, train_loss, test_loss, lr)
    epochs: int = 0
    final_lr: float = float("nan")

    def as_array(self) -> np.ndarray:
        return np.array(self.rows, dtype=float)


def loss_gradient(net: MLP, loss, batch):
    """Loss value and exact parameter gradient on one minibatch."""
    out, acts = net.forward(batch.x)
    value, dout = loss.value_and_output_grads(out, batch)
    grads_w, grads_b = net.backward(acts, dout)
    return value, grads_w, grads_b


def loss_value(net: MLP, loss, batch) -> float:
    out, _ = net.forward(batch.x)
    return loss.value(out, batch)


def train_to_convergence(
    net: MLP,
    loss,
    data_source: Callable,
    schedule: TrainSchedule,
    rng: np.random.Generator,
) -> TrainLog:
    """Minibatch descent on fresh simulated data until the rate ladder bottoms.

    Every epoch draws a fresh batch of ``schedule.batch_size`` samples; every
    ``check_every`` epochs the loss is measured on a held-out test dataset of
    twice that size (drawn once per training run, so the improvement signal
    is not drowned by evaluation noise) and the rate is halved unless the
    test loss improved by the relative threshold.  Training stops once the
    rate falls below ``stop_lr``.
    """
    adam = AdamState.for_net(net, schedule.initial_lr)
    log = TrainLog()
    test_batch = data_source(rng, 2 * schedule.batch_size)
    prev_test = loss_value(net, loss, test_batch)
    lr = schedule.initial_lr
    log.rows.append((0, float("nan"), prev_test, lr))
    epoch = 0
    train_loss = float("nan")
    while lr >= schedule.stop_lr and epoch < schedule.max_epochs:
        for _ in range(schedule.check_every):
            epoch += 1
            batch = data_source(rng, schedule.batch_size)
            train_loss, gw, gb = loss_gradient(net, loss, batch)
            adam_step(adam, net, gw, gb)
        cur_test = loss_value(net, loss, test_batch)
        if not np.isfinite(cur_test):
            raise TrainingDiverged(f"non-finite test loss at epoch {epoch}")
        denom = abs(prev_test) if prev_test != 0.0 else 1.0
        if (prev_test - cur_test) / denom < schedule.decay_threshold:
            lr *= schedule.decay
            adam.lr = lr
        prev_test = cur_test
        log.rows.append((epoch, train_loss, cur_test, lr))
    log.epochs = epoch
    log.final_lr = lr
    return log


# ---------------------------------------------------------------------------
# generic losses and checkpoints
# ---------------------------------------------------------------------------


@dataclass
class RegressionBatch:
    x: np.ndarray  # (B, d)
    y: np.ndarray  # (B,)


class ScalarMSELoss:
    """Mean squared error of the scalar value head against targets."""

    def value(self, out, batch):
        r = out[:, 0] - batch.y
        self._check(r)
        return float(np.mean(r * r))

    def value_and_output_grads(self, out, batch):
        r = out[:, 0] - batch.y
        self._check(r)
        dout = np.zeros_like(out)
        dout[:, 0] = 2.0 * r / r.size
        return float(np.mean(r * r)), dout

    @staticmethod
    def _check(residuals):
        bad = ~np.isfinite(residuals)
        if bad.any():
            idx = int(np.argmax(bad))
            raise TrainingDiverged(f"non-finite loss at sample {idx}", sample_index=idx)


def save_checkpoint(net: MLP, path: str) -> None:
    """JSON header line plus the flat little-endian float64 parameter array."""
    header = {
        "dims": net.dims,
        "seed": net.seed if isinstance(net.seed, (int, type(None))) else None,
        "n_params": net.n_params,
        "input_center": None if net.input_center is None else list(net.input_center),
        "input_scale": None if net.input_scale is None else list(net.input_scale),
    }
    theta = net.pack().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(theta.tobytes())


def load_checkpoint(path: str) -> MLP:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        theta = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    dims = header["dims"]
    weights = [np.zeros((dims[i], dims[i + 1])) for i in range(len(dims) - 1)]
    biases = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]
    center = header.get("input_center")
    scale = header.get("input_scale")
    net = MLP(weights, biases, seed=header.get("seed"),
              input_center=None if center is None else np.array(center),
              input_scale=None if scale is None else np.array(scale))
    net.unpack(theta)
    return net
