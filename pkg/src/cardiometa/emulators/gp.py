"""Gaussian-process regression with an isotropic squared-exponential kernel.

One GP per output column on standardised data.  Hyperparameters (length
scale l, signal variance s2, noise variance sn2) are picked by a log-spaced
grid search on the log marginal likelihood, refined once around the best
cell.
"""
from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .base import Emulator

logger = logging.getLogger(__name__)

MAX_JITTER = 1e-6
LARGE_N = 4000
DEFAULT_GRID = {"length": (0.1, 10.0, 7), "signal": (0.1, 10.0, 7), "noise": (1e-8, 1e-2, 5)}


class GpError(RuntimeError):
    pass


def sq_dist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    d2 = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def rbf_kernel(x, x2, signal_var: float, length: float) -> np.ndarray:
    """s2 * exp(-|x - x'|^2 / (2 l^2)); vectors give a scalar, matrices a Gram matrix."""
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x.ndim <= 1 and x2.ndim <= 1:
        diff = np.atleast_1d(x) - np.atleast_1d(x2)
        return float(signal_var * np.exp(-np.dot(diff, diff) / (2.0 * length ** 2)))
    return signal_var * np.exp(-sq_dist(x, x2) / (2.0 * length ** 2))


def _factor(K: np.ndarray, noise: float):
    """Cholesky of K + noise*I, adding jitter up to MAX_JITTER when needed."""
    n = K.shape[0]
    jitter = 0.0
    while True:
        try:
            L = cholesky(K + (noise + jitter) * np.eye(n), lower=True, check_finite=False)
            return L, jitter
        except np.linalg.LinAlgError:
            jitter = 1e-12 if jitter == 0.0 else jitter * 10.0
            if jitter > MAX_JITTER * (1 + 1e-9):
                raise GpError(f"Cholesky failed even with jitter {MAX_JITTER:g}") from None


def log_marginal_likelihood(D2: np.ndarray, y: np.ndarray, length: float, signal_var: float,
                            noise: float) -> float:
    K = signal_var * np.exp(-D2 / (2.0 * length ** 2))
    L, _ = _factor(K, noise)
    alpha = cho_solve((L, True), y, check_finite=False)
    n = y.shape[0]
    return float(-0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * np.log(2.0 * np.pi))


@dataclass
class GpHyper:
    length: float
    signal_var: float
    noise: float


def _grid(lo, hi, k):
    return np.logspace(np.log10(lo), np.log10(hi), k)


def select_hyperparameters(D2: np.ndarray, y: np.ndarray, grid=None) -> tuple[GpHyper, float]:
    grid = dict(DEFAULT_GRID, **(grid or {}))
    axes = [_grid(*grid["length"]), _grid(*grid["signal"]), _grid(*grid["noise"])]

    def search(axes):
        best = (-np.inf, None)
        for l, s, nz in itertools.product(*axes):
            try:
                v = log_marginal_likelihood(D2, y, l, s, nz)
            except GpError:
                continue
            if v > best[0]:
                best = (v, (l, s, nz))
        return best

    best = search(axes)
    if best[1] is None:
        raise GpError("no hyperparameter combination gave a positive-definite kernel")
    # refine once: same number of points spanning the neighbouring grid cells
    fine = []
    for ax, val in zip(axes, best[1]):
        if len(ax) < 2:
            fine.append(ax)
            continue
        step = np.log10(ax[1]) - np.log10(ax[0])
        c = np.log10(val)
        fine.append(np.logspace(c - step, c + step, len(ax)))
    refined = search(fine)
    if refined[0] > best[0]:
        best = refined
    l, s, nz = best[1]
    return GpHyper(float(l), float(s), float(nz)), float(best[0])


@dataclass
class GpOutput:
    hyper: GpHyper
    y: np.ndarray
    L: np.ndarray
    alpha: np.ndarray
    jitter: float
    lml: float


def gp_fit_column(X: np.ndarray, y: np.ndarray, hyper: GpHyper | None = None, grid=None) -> GpOutput:
    D2 = sq_dist(X, X)
    if hyper is None:
        hyper, lml = select_hyperparameters(D2, y, grid)
    else:
        lml = log_marginal_likelihood(D2, y, hyper.length, hyper.signal_var, hyper.noise)
    K = hyper.signal_var * np.exp(-D2 / (2.0 * hyper.length ** 2))
    L, jitter = _factor(K, hyper.noise)
    alpha = cho_solve((L, True), y, check_finite=False)
    return GpOutput(hyper, y.copy(), L, alpha, jitter, lml)


def gp_predict_column(X: np.ndarray, out: GpOutput, Xs: np.ndarray):
    Ks = rbf_kernel(Xs, X, out.hyper.signal_var, out.hyper.length)
    mean = Ks @ out.alpha
    v = solve_triangular(out.L, Ks.T, lower=True, check_finite=False)
    var = out.hyper.signal_var - np.sum(v * v, axis=0)
    return mean, np.maximum(var, 0.0)


class GPRegressor(Emulator):
    """Independent GP per output with grid-searched hyperparameters.

    ``predict(X, return_std=True)`` also returns the predictive standard
    deviation (latent function, physical units).
    """

    kind = "gp"

    def __init__(self, length_scale=None, signal_variance=None, noise_variance=None, grid=None):
        self.length_scale = length_scale
        self.signal_variance = signal_variance
        self.noise_variance = noise_variance
        self.grid = grid

    def _fixed(self):
        if None in (self.length_scale, self.signal_variance, self.noise_variance):
            return None
        return GpHyper(self.length_scale, self.signal_variance, self.noise_variance)

    def fit(self, X, Y, input_names=None, output_names=None):
        X, Y = self._validate_xy(X, Y)
        if X.shape[0] < 2:
            raise ValueError("a GP needs at least two training rows")
        if X.shape[0] > LARGE_N:
            warnings.warn(f"GP with n={X.shape[0]} training rows: cost grows as n^3", RuntimeWarning, stacklevel=2)
        self._fit_scalers(X, Y, input_names, output_names)
        self.X_train_ = self.input_scaler_.transform(X)
        Z = self.output_scaler_.transform(Y)
        self.outputs_ = [gp_fit_column(self.X_train_, Z[:, k], self._fixed(), self.grid) for k in range(Z.shape[1])]
        return self

    def _predict_scaled(self, Xs):
        res = [gp_predict_column(self.X_train_, o, Xs) for o in self.outputs_]
        return np.stack([r[0] for r in res], axis=1), np.stack([r[1] for r in res], axis=1)

    def predict(self, X, return_std=False):
        X, single = self._validate_x(X)
        mean, var = self._predict_scaled(self.input_scaler_.transform(X))
        mean = self._shape_out(self.output_scaler_.inverse_transform(mean), single)
        if not return_std:
            return mean
        std = self._shape_out(np.sqrt(var) * self.output_scaler_.std_, single)
        return mean, std

    def _state_payload(self) -> dict:
        return {"X_train": self.X_train_.tolist(),
                "outputs": [{"y": o.y, "length": o.hyper.length, "signal_variance": o.hyper.signal_var,
                             "noise_variance": o.hyper.noise, "log_marginal_likelihood": o.lml}
                            for o in self.outputs_]}

    def _restore_state(self, doc) -> None:
        self.X_train_ = np.asarray(doc["X_train"], dtype=float)
        self.outputs_ = [gp_fit_column(self.X_train_, np.asarray(o["y"], dtype=float),
                                       GpHyper(o["length"], o["signal_variance"], o["noise_variance"]))
                         for o in doc["outputs"]]
