"""Recurrent emulator producing a whole time signal from scalar inputs.

The parameters set the initial hidden state through an affine encoder; a
gated recurrent unit then runs for T steps driven only by a normalised clock
s_t = t / (T - 1), and a softplus readout emits one non-negative value per
step.  Gradients are obtained by backpropagation through time.

Gate equations (row-vector convention)::

    z = sigmoid(h U_z + s V_z + b_z)
    r = sigmoid(h U_r + s V_r + b_r)
    n = tanh((r * h) U_n + s V_n + b_n)
    h' = (1 - z) * n + z * h
    y = softplus(h' w + beta)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..sampling import Scaler
from .base import Emulator
from .ffnn import Adam, TrainConfig

logger = logging.getLogger(__name__)

PARAM_NAMES = ("E", "e", "U", "V", "b", "w", "beta")


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _softplus(a):
    return np.logaddexp(0.0, a)


@dataclass
class SeqModel:
    """Encoder (E, e), gates U (H, 3H), V (3H,), b (3H,) ordered z, r, n, readout (w, beta)."""

    E: np.ndarray
    e: np.ndarray
    U: np.ndarray
    V: np.ndarray
    b: np.ndarray
    w: np.ndarray
    beta: np.ndarray
    length: int
    cell: str = "gru"

    @property
    def hidden(self) -> int:
        return self.e.shape[0]

    @property
    def input_dim(self) -> int:
        return self.E.shape[0]

    def params(self) -> list:
        return [self.E, self.e, self.U, self.V, self.b, self.w, self.beta]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, theta) -> "SeqModel":
        k = 0
        for p in self.params():
            p[...] = np.asarray(theta[k:k + p.size]).reshape(p.shape)
            k += p.size
        return self

    def copy(self) -> "SeqModel":
        return SeqModel(*(p.copy() for p in self.params()), self.length, self.cell)

    def to_dict(self) -> dict:
        out = {n: {"shape": list(p.shape), "values": p.ravel().tolist()} for n, p in zip(PARAM_NAMES, self.params())}
        out.update({"length": self.length, "cell": self.cell})
        return out

    @classmethod
    def from_dict(cls, d) -> "SeqModel":
        arrs = [np.asarray(d[n]["values"], dtype=float).reshape(d[n]["shape"]) for n in PARAM_NAMES]
        return cls(*arrs, int(d["length"]), d.get("cell", "gru"))


def seq_init(d: int, length: int, hidden: int = 32, seed: Optional[int] = 0) -> SeqModel:
    rng = np.random.default_rng(seed)
    lim_e = np.sqrt(6.0 / (d + hidden))
    lim_u = np.sqrt(6.0 / (2 * hidden))
    E = rng.uniform(-lim_e, lim_e, (d, hidden))
    U = rng.uniform(-lim_u, lim_u, (hidden, 3 * hidden))
    V = rng.uniform(-1.0, 1.0, 3 * hidden)
    b = np.zeros(3 * hidden)
    b[:hidden] = 1.0   # bias the update gate towards carrying the state
    w = rng.uniform(-lim_u, lim_u, hidden)
    return SeqModel(E, np.zeros(hidden), U, V, b, w, np.zeros(1), int(length))


def _clock(T: int) -> np.ndarray:
    return np.arange(T) / max(T - 1, 1)


def _run(model: SeqModel, X: np.ndarray, keep: bool):
    H = model.hidden
    T = model.length
    s = _clock(T)
    h = np.tanh(X @ model.E + model.e)
    Uzr, Un = model.U[:, :2 * H], model.U[:, 2 * H:]
    Y = np.empty((X.shape[0], T))
    cache = [] if keep else None
    h0 = h
    for t in range(T):
        azr = h @ Uzr + (s[t] * model.V[:2 * H] + model.b[:2 * H])
        zr = _sigmoid(azr)
        z, r = zr[:, :H], zr[:, H:]
        rh = r * h
        n = np.tanh(rh @ Un + (s[t] * model.V[2 * H:] + model.b[2 * H:]))
        h_new = n + z * (h - n)
        o = h_new @ model.w + model.beta[0]
        Y[:, t] = _softplus(o)
        if keep:
            cache.append((h, z, r, rh, n, h_new, o))
        h = h_new
    return Y, h0, cache


def seq_forward(model: SeqModel, X) -> np.ndarray:
    """Scaled signals for scaled inputs; (T,) for one point, (n, T) for a batch."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X2 = X.reshape(1, -1) if single else X
    if X2.shape[1] != model.input_dim:
        raise ValueError(f"expected {model.input_dim} inputs, got {X2.shape[1]}")
    Y = _run(model, X2, keep=False)[0]
    return Y[0] if single else Y


def seq_loss_grad(model: SeqModel, X, Y) -> tuple[float, list]:
    """MSE over all samples and steps and its gradient (list matching params())."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    H = model.hidden
    T = model.length
    s = _clock(T)
    P, h0, cache = _run(model, X, keep=True)
    diff = P - Y
    loss = float(np.mean(diff * diff))
    scale = 2.0 / diff.size
    Uzr, Un = model.U[:, :2 * H], model.U[:, 2 * H:]
    gU = np.zeros_like(model.U)
    gV = np.zeros_like(model.V)
    gb = np.zeros_like(model.b)
    gw = np.zeros_like(model.w)
    gbeta = 0.0
    dh = np.zeros((X.shape[0], H))
    for t in range(T - 1, -1, -1):
        h, z, r, rh, n, h_new, o = cache[t]
        do = scale * diff[:, t] * _sigmoid(o)
        gw += h_new.T @ do
        gbeta += do.sum()
        dh = dh + do[:, None] * model.w[None, :]
        dn = dh * (1.0 - z)
        dz = dh * (h - n)
        dh_prev = dh * z
        dan = dn * (1.0 - n * n)
        gU[:, 2 * H:] += rh.T @ dan
        sum_an = dan.sum(axis=0)
        gV[2 * H:] += s[t] * sum_an
        gb[2 * H:] += sum_an
        drh = dan @ Un.T
        dr = drh * h
        dh_prev = dh_prev + drh * r
        dazr = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=1)
        gU[:, :2 * H] += h.T @ dazr
        sum_zr = dazr.sum(axis=0)
        gV[:2 * H] += s[t] * sum_zr
        gb[:2 * H] += sum_zr
        dh = dh_prev + dazr @ Uzr.T
    da0 = dh * (1.0 - h0 * h0)
    gE = X.T @ da0
    ge = da0.sum(axis=0)
    return loss, [gE, ge, gU, gV, gb, gw, np.array([gbeta])]


@dataclass
class SeqTrainResult:
    model: SeqModel
    history: dict = field(default_factory=dict)
    best_epoch: int = 0


def seq_train(model: SeqModel, X, Y, config: TrainConfig = TrainConfig(batch_size=64),
              clip: float = 5.0) -> SeqTrainResult:
    """Adam with early stopping, as for the feed-forward emulator.

    Gradients are clipped to a global norm of ``clip`` to keep long unrolls
    stable (``clip=None`` disables it).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[1] != model.length:
        raise ValueError(f"signals have length {Y.shape[1]}, model expects {model.length}")
    if X.shape[0] != Y.shape[0] or X.shape[0] == 0:
        raise ValueError("inputs and signals must be non-empty with matching rows")
    rng = np.random.default_rng(config.seed)
    n = X.shape[0]
    n_val = min(int(round(config.validation_fraction * n)), n - 1)
    perm = rng.permutation(n)
    Xv, Yv = X[perm[:n_val]], Y[perm[:n_val]]
    Xf, Yf = X[perm[n_val:]], Y[perm[n_val:]]
    model = model.copy()
    theta = model.flat()
    opt = Adam(theta.size, config.learning_rate, config.beta1, config.beta2, config.epsilon)
    history = {"train_loss": [], "val_loss": []}
    best = (np.inf, 0, theta.copy())
    stale = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(Xf.shape[0])
        losses = []
        for bi, start in enumerate(range(0, Xf.shape[0], config.batch_size)):
            idx = order[start:start + config.batch_size]
            loss, grads = seq_loss_grad(model, Xf[idx], Yf[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {bi}")
            g = np.concatenate([gr.ravel() for gr in grads])
            if clip is not None:
                norm = np.sqrt(g @ g)
                if norm > clip:
                    g = g * (clip / norm)
            theta += opt.step(g)
            model.set_flat(theta)
            losses.append(loss * idx.size)
        train_loss = float(np.sum(losses) / Xf.shape[0])
        if n_val:
            diff = seq_forward(model, Xv) - Yv
            val_loss = float(np.mean(diff * diff))
        else:
            val_loss = train_loss
        if not np.isfinite(val_loss):
            raise FloatingPointError(f"non-finite validation loss at epoch {epoch}")
        history["train_loss"].append(train_loss)
        history["val_loss"].append(val_loss)
        if val_loss < best[0]:
            best = (val_loss, epoch, theta.copy())
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break
    model.set_flat(best[2])
    return SeqTrainResult(model, history, best[1])


class SequenceRegressor(Emulator):
    """Signal emulator: ``fit(X, signals)``, ``predict(X) -> (n, T)``.

    Signals are divided by their dataset-wide maximum for training and
    multiplied back on prediction.
    """

    kind = "sequence"

    def __init__(self, hidden=32, learning_rate=3e-3, beta1=0.9, beta2=0.999, epsilon=1e-8, batch_size=64,
                 max_epochs=5000, patience=100, validation_fraction=0.1, seed=0, clip=5.0):
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
        self.clip = clip

    def fit(self, X, Y, input_names=None, output_names=None):
        X = np.asarray(X, dtype=float)
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if X.ndim != 2 or X.shape[0] != Y.shape[0]:
            raise ValueError("X must be (n, d) with one signal row per sample")
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = Y.shape[1]
        self._y_1d = False
        self.input_scaler_ = Scaler().fit(X, input_names)
        peak = float(np.max(np.abs(Y)))
        self.signal_scale_ = peak if peak > 0 else 1.0
        config = TrainConfig(self.learning_rate, self.beta1, self.beta2, self.epsilon, self.batch_size,
                             self.max_epochs, self.patience, self.validation_fraction, self.seed)
        model = seq_init(X.shape[1], Y.shape[1], self.hidden, self.seed)
        res = seq_train(model, self.input_scaler_.transform(X), Y / self.signal_scale_, config, self.clip)
        self.model_ = res.model
        self.history_ = res.history
        self.best_epoch_ = res.best_epoch
        return self

    def predict(self, X):
        X, single = self._validate_x(X)
        Y = seq_forward(self.model_, self.input_scaler_.transform(X)) * self.signal_scale_
        return Y[0] if single else Y

    def score(self, X, Y, sample_weight=None):
        """Negative mean relative L2 error over signals."""
        return -relative_l2(Y, self.predict(X))

    def _scaler_payload(self) -> dict:
        return {"input_scaler": self.input_scaler_.to_dict(), "signal_scale": self.signal_scale_,
                "n_features_in": self.n_features_in_, "n_outputs": self.n_outputs_}

    def _restore_scalers(self, doc) -> None:
        self.input_scaler_ = Scaler.from_dict(doc["input_scaler"])
        self.signal_scale_ = float(doc["signal_scale"])
        self.n_features_in_ = int(doc["n_features_in"])
        self.n_outputs_ = int(doc["n_outputs"])
        self._y_1d = False

    def _state_payload(self) -> dict:
        return {"model": self.model_.to_dict(),
                "training": {"best_epoch": self.best_epoch_, "train_loss": self.history_["train_loss"],
                             "val_loss": self.history_["val_loss"]}}

    def _restore_state(self, doc) -> None:
        self.model_ = SeqModel.from_dict(doc["model"])
        tr = doc.get("training", {})
        self.best_epoch_ = tr.get("best_epoch", 0)
        self.history_ = {"train_loss": tr.get("train_loss", []), "val_loss": tr.get("val_loss", [])}


def relative_l2(Y_true, Y_pred, per_signal: bool = False) -> float:
    """||Y - Y_hat|| / ||Y|| over the whole set, or the mean of per-signal ratios."""
    Y_true = np.atleast_2d(np.asarray(Y_true, dtype=float))
    Y_pred = np.atleast_2d(np.asarray(Y_pred, dtype=float))
    if not per_signal:
        return float(np.linalg.norm(Y_true - Y_pred) / np.linalg.norm(Y_true))
    num = np.linalg.norm(Y_true - Y_pred, axis=1)
    den = np.linalg.norm(Y_true, axis=1)
    return float(np.mean(num / np.where(den > 0, den, 1.0)))
