"""Polynomial chaos expansion on uniform inputs (Legendre basis).

Inputs are mapped affinely onto [-1, 1]^d.  Coefficients come from least
squares; terms whose coefficient is small relative to the largest one are
dropped and the model refitted until the retained set is stable.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .base import Emulator

logger = logging.getLogger(__name__)

MAX_TERMS = 1_000_000


class PceError(ValueError):
    pass


@dataclass
class PceBasis:
    d: int
    degree: int
    multi_indices: np.ndarray   # (N, d) ints

    @property
    def size(self) -> int:
        return self.multi_indices.shape[0]


def basis_size(d: int, P: int) -> int:
    return math.comb(d + P, d)


def basis_enumerate(d: int, P: int) -> PceBasis:
    """All multi-indices of total degree <= P in graded lexicographic order."""
    if d < 1 or P < 0:
        raise PceError("need d >= 1 and P >= 0")
    count = basis_size(d, P)
    if count > MAX_TERMS:
        raise PceError(f"basis with d={d}, P={P} would have {count} terms (limit {MAX_TERMS})")
    out = []

    def compositions(total, k):
        if k == 1:
            yield (total,)
            return
        for first in range(total, -1, -1):
            for rest in compositions(total - first, k - 1):
                yield (first,) + rest

    for deg in range(P + 1):
        out.extend(compositions(deg, d))
    return PceBasis(d, P, np.array(out, dtype=int).reshape(-1, d))


def legendre_orthonormal(k: int, x) -> np.ndarray:
    """Degree-k Legendre polynomial scaled to unit variance under U(-1, 1)."""
    x = np.asarray(x, dtype=float)
    return _legendre_table(x, k)[k]


def _legendre_table(x: np.ndarray, P: int) -> list:
    """Orthonormal Legendre values for degrees 0..P (three-term recurrence)."""
    vals = [np.ones_like(x)]
    if P >= 1:
        vals.append(x.copy())
    for n in range(1, P):
        vals.append(((2 * n + 1) * x * vals[n] - n * vals[n - 1]) / (n + 1))
    return [v * math.sqrt(2 * k + 1) for k, v in enumerate(vals)]


def design_matrix(basis: PceBasis, U: np.ndarray) -> np.ndarray:
    """Psi[i, j] = prod_k L_{alpha_jk}(u_ik) for points U in [-1, 1]^d."""
    U = np.atleast_2d(U)
    if U.shape[1] != basis.d:
        raise PceError(f"expected {basis.d} input columns, got {U.shape[1]}")
    tables = [np.stack(_legendre_table(U[:, k], basis.degree), axis=1) for k in range(basis.d)]
    Psi = np.ones((U.shape[0], basis.size))
    for k in range(basis.d):
        Psi *= tables[k][:, basis.multi_indices[:, k]]
    return Psi


@dataclass
class PceOutput:
    """Retained terms and coefficients for one output column."""

    terms: np.ndarray          # indices into the full basis
    coefficients: np.ndarray
    loo_error: float
    ridge: bool = False


@dataclass
class PceModel:
    basis: PceBasis
    outputs: list
    lows: np.ndarray
    highs: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_unit(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return 2.0 * (X - self.lows) / (self.highs - self.lows) - 1.0


def _least_squares(Psi: np.ndarray, y: np.ndarray, ridge_fallback: bool):
    n, N = Psi.shape
    rank = np.linalg.matrix_rank(Psi)
    if rank < N:
        if not ridge_fallback:
            raise PceError(f"rank-deficient design ({rank} < {N} terms) and ridge fallback disabled")
        G = Psi.T @ Psi
        lam = 1e-8 * np.trace(G) / N
        return np.linalg.solve(G + lam * np.eye(N), Psi.T @ y), True
    return np.linalg.lstsq(Psi, y, rcond=None)[0], False


def loo_relative_error(Psi: np.ndarray, y: np.ndarray, coef: np.ndarray) -> float:
    """Leave-one-out error from the hat-matrix diagonal, divided by var(y)."""
    Q, _ = np.linalg.qr(Psi)
    h = np.sum(Q * Q, axis=1)
    if np.any(h >= 1.0 - 1e-12):
        raise PceError("degenerate leverage (h_ii = 1); leave-one-out error undefined")
    resid = y - Psi @ coef
    var = np.var(y)
    loo = np.mean((resid / (1.0 - h)) ** 2)
    return float(loo / var) if var > 0 else float(loo)


def pce_fit(X, Y, basis: PceBasis, epsilon: float = 1e-4, ridge_fallback: bool = True, lows=None,
            highs=None) -> PceModel:
    """Least-squares PCE with iterative removal of low-contribution terms.

    A term is removed when |alpha_j| < epsilon * max |alpha| over the
    non-constant terms; the constant term is always kept.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    Y = Y.reshape(-1, 1) if Y.ndim == 1 else Y
    if X.shape[0] < basis.size:
        raise PceError(f"{X.shape[0]} training rows but the basis needs at least C(d+P, d) = {basis.size}")
    lows = X.min(axis=0) if lows is None else np.asarray(lows, dtype=float)
    highs = X.max(axis=0) if highs is None else np.asarray(highs, dtype=float)
    if np.any(highs <= lows):
        raise PceError("input ranges must have high > low")
    model = PceModel(basis, [], lows, highs, {"epsilon": epsilon})
    Psi_full = design_matrix(basis, model.to_unit(X))
    for col in range(Y.shape[1]):
        y = Y[:, col]
        terms = np.arange(basis.size)
        while True:
            coef, ridge = _least_squares(Psi_full[:, terms], y, ridge_fallback)
            mags = np.abs(coef)
            nonconst = terms != 0
            top = mags[nonconst].max() if np.any(nonconst) else 0.0
            keep = ~nonconst | (mags >= epsilon * top)
            if epsilon <= 0 or top == 0.0 or np.all(keep):
                break
            terms = terms[keep]
        loo = float("nan") if ridge else loo_relative_error(Psi_full[:, terms], y, coef)
        model.outputs.append(PceOutput(terms, coef, loo, ridge))
    if any(o.ridge for o in model.outputs):
        model.meta["ridge_fallback_used"] = True
    return model


def pce_eval(model: PceModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.basis.d:
        raise PceError(f"expected {model.basis.d} input columns, got {X.shape[1]}")
    U = model.to_unit(X)
    if np.any(np.abs(U) > 1.0 + 1e-9):
        warnings.warn("PCE evaluated outside its training ranges", RuntimeWarning, stacklevel=2)
    Psi = design_matrix(model.basis, U)
    return np.stack([Psi[:, o.terms] @ o.coefficients for o in model.outputs], axis=1)


def pce_loo_error(model: PceModel, X, Y) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
    Psi = design_matrix(model.basis, model.to_unit(X))
    return np.array([loo_relative_error(Psi[:, o.terms], Y[:, k], o.coefficients)
                     for k, o in enumerate(model.outputs)])


def pce_sobol(model: PceModel):
    """First-order and total indices from the squared coefficients."""
    from ..analysis.sobol import SobolIndices
    d = model.basis.d
    first = np.zeros((len(model.outputs), d))
    total = np.zeros((len(model.outputs), d))
    for k, o in enumerate(model.outputs):
        alpha = model.basis.multi_indices[o.terms]
        c2 = o.coefficients ** 2
        mask = alpha.sum(axis=1) > 0
        D = c2[mask].sum()
        # round-off coefficients of a constant target are not variance
        if D <= 1e-20 * c2.sum():
            raise PceError(f"output {k} has zero variance")
        active = alpha > 0
        only = active & (active.sum(axis=1, keepdims=True) == 1)
        first[k] = (c2[:, None] * only).sum(axis=0) / D
        total[k] = (c2[:, None] * active).sum(axis=0) / D
    return SobolIndices(first, total, method="pce")


class PCERegressor(Emulator):
    """PCE emulator; the degree is lowered automatically when data are scarce."""

    kind = "pce"

    def __init__(self, degree=3, epsilon=1e-4, ridge_fallback=True, ranges=None):
        self.degree = degree
        self.epsilon = epsilon
        self.ridge_fallback = ridge_fallback
        self.ranges = ranges

    def fit(self, X, Y, input_names=None, output_names=None):
        X, Y = self._validate_xy(X, Y)
        self._fit_scalers(X, Y, input_names, output_names)
        d = X.shape[1]
        P = self.degree
        # reduce towards a linear basis; below d + 1 rows pce_fit reports the requirement
        while P > 1 and basis_size(d, P) > X.shape[0]:
            P -= 1
        if P != self.degree:
            logger.warning("PCE degree lowered from %d to %d for %d training rows", self.degree, P, X.shape[0])
        if self.ranges is not None:
            r = np.asarray(self.ranges, dtype=float)
            lows, highs = r[:, 0], r[:, 1]
        else:
            lows, highs = X.min(axis=0), X.max(axis=0)
        self.degree_ = P
        self.model_ = pce_fit(X, self.output_scaler_.transform(Y), basis_enumerate(d, P), self.epsilon,
                              self.ridge_fallback, lows, highs)
        self.loo_error_ = np.array([o.loo_error for o in self.model_.outputs])
        return self

    def predict(self, X):
        X, single = self._validate_x(X)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            Z = pce_eval(self.model_, X)
        return self._shape_out(self.output_scaler_.inverse_transform(Z), single)

    def sobol_indices(self):
        return pce_sobol(self.model_)

    def _state_payload(self) -> dict:
        m = self.model_
        return {"degree_used": self.degree_, "lows": m.lows, "highs": m.highs,
                "multi_indices": m.basis.multi_indices.tolist(),
                "outputs": [{"terms": o.terms.tolist(), "coefficients": o.coefficients, "loo_error": o.loo_error,
                             "ridge": o.ridge} for o in m.outputs]}

    def _restore_state(self, doc) -> None:
        mi = np.asarray(doc["multi_indices"], dtype=int)
        P = int(doc["degree_used"])
        basis = PceBasis(mi.shape[1], P, mi)
        outs = [PceOutput(np.asarray(o["terms"], dtype=int), np.asarray(o["coefficients"], dtype=float),
                          float(o["loo_error"]), bool(o["ridge"])) for o in doc["outputs"]]
        self.degree_ = P
        self.model_ = PceModel(basis, outs, np.asarray(doc["lows"], float), np.asarray(doc["highs"], float))
        self.loo_error_ = np.array([o.loo_error for o in outs])
