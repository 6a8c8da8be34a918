"""Feed-forward ReLU network with hand-written backpropagation and Adam.

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch ``Z`` of
row vectors maps to ``relu(Z @ W + b)``.  The loss is the mean over samples
and outputs of the squared error.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .base import Emulator

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "identity")


@dataclass
class Network:
    weights: list
    biases: list
    activations: list

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def n_parameters(self) -> int:
        return int(sum(W.size + b.size for W, b in zip(self.weights, self.biases)))

    def copy(self) -> "Network":
        return Network([W.copy() for W in self.weights], [b.copy() for b in self.biases], list(self.activations))

    def validate(self) -> None:
        if not self.weights or len(self.weights) != len(self.biases) or len(self.weights) != len(self.activations):
            raise ValueError("layer lists must be non-empty and of equal length")
        for k, (W, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if b.shape != (W.shape[1],):
                raise ValueError(f"layer {k}: bias shape {b.shape} does not match weights {W.shape}")
            if k and self.weights[k - 1].shape[1] != W.shape[0]:
                raise ValueError(f"layer {k}: input width {W.shape[0]} != previous output width")
        if self.activations[-1] != "identity":
            raise ValueError("the output layer must be linear")

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)])

    def set_flat(self, theta: np.ndarray) -> "Network":
        k = 0
        for W, b in zip(self.weights, self.biases):
            W[...] = theta[k:k + W.size].reshape(W.shape)
            k += W.size
            b[...] = theta[k:k + b.size]
            k += b.size
        return self

    def to_dict(self) -> dict:
        return {"layers": [{"shape": list(W.shape), "weights": W.ravel().tolist(), "bias": b.tolist(),
                            "activation": act}
                           for W, b, act in zip(self.weights, self.biases, self.activations)]}

    @classmethod
    def from_dict(cls, d) -> "Network":
        Ws, bs, acts = [], [], []
        for layer in d["layers"]:
            Ws.append(np.asarray(layer["weights"], dtype=float).reshape(layer["shape"]))
            bs.append(np.asarray(layer["bias"], dtype=float))
            acts.append(layer["activation"])
        net = cls(Ws, bs, acts)
        net.validate()
        return net


def ffnn_init(d: int, m: int, hidden: Sequence[int] = (64, 32, 32), seed: Optional[int] = 0) -> Network:
    """He-uniform weights, zero biases; ReLU hidden layers and a linear output."""
    if d < 1 or m < 1:
        raise ValueError("input and output dimensions must be at least 1")
    rng = np.random.default_rng(seed)
    sizes = [d, *hidden, m]
    Ws, bs, acts = [], [], []
    for k in range(len(sizes) - 1):
        limit = np.sqrt(6.0 / sizes[k])
        Ws.append(rng.uniform(-limit, limit, size=(sizes[k], sizes[k + 1])))
        bs.append(np.zeros(sizes[k + 1]))
        acts.append("relu" if k < len(sizes) - 2 else "identity")
    return Network(Ws, bs, acts)


def _check_input(net: Network, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x.reshape(1, -1) if single else x
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise ValueError(f"expected inputs of dimension {net.input_dim}, got shape {x.shape}")
    return X, single


def _forward(net: Network, X: np.ndarray):
    """Outputs plus the per-layer inputs and pre-activations kept for backprop."""
    inputs, pre = [], []
    Z = X
    for W, b, act in zip(net.weights, net.biases, net.activations):
        inputs.append(Z)
        A = Z @ W + b
        pre.append(A)
        Z = np.maximum(A, 0.0) if act == "relu" else A
    return Z, inputs, pre


def ffnn_forward(net: Network, x) -> np.ndarray:
    X, single = _check_input(net, x)
    Y = _forward(net, X)[0]
    return Y[0] if single else Y


def ffnn_loss(net: Network, X, Y) -> float:
    diff = ffnn_forward(net, X) - np.asarray(Y, dtype=float).reshape(len(X), -1)
    return float(np.mean(diff * diff))


def ffnn_grad_weights(net: Network, X, Y) -> tuple[float, list, list]:
    """Mean squared error and its gradients with respect to every W and b."""
    X, _ = _check_input(net, X)
    Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
    out, inputs, pre = _forward(net, X)
    diff = out - Y
    loss = float(np.mean(diff * diff))
    delta = 2.0 * diff / diff.size
    gW = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    for k in range(len(net.weights) - 1, -1, -1):
        if net.activations[k] == "relu":
            delta = delta * (pre[k] > 0.0)
        gW[k] = inputs[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k:
            delta = delta @ net.weights[k].T
    return loss, gW, gb


def ffnn_grad_input(net: Network, x) -> np.ndarray:
    """Jacobian dy/dx, shape (m, d); a batch gives (n, m, d)."""
    return ffnn_value_and_grad_input(net, x)[1]


def ffnn_value_and_grad_input(net: Network, x) -> tuple[np.ndarray, np.ndarray]:
    """Network output together with its input Jacobian (one forward pass)."""
    X, single = _check_input(net, x)
    out, _, pre = _forward(net, X)
    # propagate the identity backwards: J = W_L^T D_{L-1} ... D_1 W_1^T
    J = np.broadcast_to(np.eye(net.output_dim), (X.shape[0], net.output_dim, net.output_dim)).copy()
    for k in range(len(net.weights) - 1, -1, -1):
        if net.activations[k] == "relu":
            J = J * (pre[k] > 0.0)[:, None, :]
        J = J @ net.weights[k].T
    return (out[0], J[0]) if single else (out, J)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 5000
    patience: int = 100
    validation_fraction: float = 0.1
    seed: Optional[int] = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epsilon <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning rate, epsilon, batch size and epoch count must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.patience < 0 or self.patience >= self.max_epochs:
            raise ValueError("patience must be non-negative and below max_epochs")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")


@dataclass
class TrainResult:
    net: Network
    history: dict = field(default_factory=dict)
    best_epoch: int = 0


class Adam:
    def __init__(self, n: int, lr: float, beta1: float, beta2: float, eps: float):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def ffnn_train(net: Network, X, Y, config: TrainConfig = TrainConfig()) -> TrainResult:
    """Mini-batch Adam on the MSE with early stopping on a held-out slice.

    The returned network carries the weights of the epoch with the lowest
    validation loss (training loss when no validation slice is used).
    """
    X, _ = _check_input(net, X)
    Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    n = X.shape[0]
    n_val = int(round(config.validation_fraction * n))
    if n_val >= n:
        n_val = n - 1
    perm = rng.permutation(n)
    val_idx, fit_idx = perm[:n_val], perm[n_val:]
    Xf, Yf = X[fit_idx], Y[fit_idx]
    Xv, Yv = X[val_idx], Y[val_idx]
    net = net.copy()
    theta = net.flat()
    opt = Adam(theta.size, config.learning_rate, config.beta1, config.beta2, config.epsilon)
    history = {"train_loss": [], "val_loss": []}
    best = (np.inf, 0, theta.copy())
    stale = 0
    nf = Xf.shape[0]
    for epoch in range(config.max_epochs):
        order = rng.permutation(nf)
        for bi, start in enumerate(range(0, nf, config.batch_size)):
            idx = order[start:start + config.batch_size]
            loss, gW, gb = ffnn_grad_weights(net, Xf[idx], Yf[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {bi}")
            grad = np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(gW, gb)])
            theta += opt.step(grad)
            net.set_flat(theta)
        train_loss = ffnn_loss(net, Xf, Yf)
        val_loss = ffnn_loss(net, Xv, Yv) if n_val else train_loss
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise FloatingPointError(f"non-finite loss at the end of epoch {epoch}")
        history["train_loss"].append(train_loss)
        history["val_loss"].append(val_loss)
        if val_loss < best[0]:
            best = (val_loss, epoch, theta.copy())
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break
    net.set_flat(best[2])
    return TrainResult(net, history, best[1])


class FFNNRegressor(Emulator):
    """Multi-output feed-forward network emulator.

    Inputs and outputs are standardised internally; ``predict`` and
    ``jacobian`` work in physical units.
    """

    kind = "ffnn"

    def __init__(self, hidden=(64, 32, 32), learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8,
                 batch_size=64, max_epochs=5000, patience=100, validation_fraction=0.1, seed=0):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.beta1, self.beta2, self.epsilon, self.batch_size,
                           self.max_epochs, self.patience, self.validation_fraction, self.seed)

    def fit(self, X, Y, input_names=None, output_names=None):
        X, Y = self._validate_xy(X, Y)
        self._fit_scalers(X, Y, input_names, output_names)
        config = self._config()
        net = ffnn_init(X.shape[1], Y.shape[1], tuple(self.hidden), self.seed)
        result = ffnn_train(net, self.input_scaler_.transform(X), self.output_scaler_.transform(Y), config)
        self.network_ = result.net
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    def predict(self, X):
        X, single = self._validate_x(X)
        Z = ffnn_forward(self.network_, self.input_scaler_.transform(X))
        return self._shape_out(self.output_scaler_.inverse_transform(Z), single)

    def predict_scaled(self, Z):
        """Network output for already standardised inputs (standardised units)."""
        return ffnn_forward(self.network_, Z)

    def jacobian(self, X):
        """dy/dx in physical units: (m, d) for one point, (n, m, d) for a batch."""
        X, single = self._validate_x(X)
        J = ffnn_grad_input(self.network_, self.input_scaler_.transform(X))
        J = J * self.output_scaler_.std_[None, :, None] / self.input_scaler_.std_[None, None, :]
        return J[0] if single else J

    def predict_with_jacobian(self, X):
        """Predictions and Jacobians for a batch, sharing one forward pass."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        X, _ = self._validate_x(X)
        Z, J = ffnn_value_and_grad_input(self.network_, self.input_scaler_.transform(X))
        J = J * self.output_scaler_.std_[None, :, None] / self.input_scaler_.std_[None, None, :]
        return self.output_scaler_.inverse_transform(Z), J

    def _state_payload(self) -> dict:
        return {"network": self.network_.to_dict(),
                "training": {"best_epoch": self.best_epoch_, "epochs_run": len(self.history_["val_loss"]),
                             "train_loss": self.history_["train_loss"], "val_loss": self.history_["val_loss"]}}

    def _restore_state(self, doc) -> None:
        self.network_ = Network.from_dict(doc["network"])
        tr = doc.get("training", {})
        self.best_epoch_ = tr.get("best_epoch", 0)
        self.history_ = {"train_loss": tr.get("train_loss", []), "val_loss": tr.get("val_loss", [])}
