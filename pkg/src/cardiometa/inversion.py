"""Parameter estimation on a differentiable emulator and two-step UQ.

The box constraint lo < x < hi is removed with a sigmoid change of
variables x = lo + (hi - lo) / (1 + exp(-kappa psi)); Adam then minimises
the weighted misfit over psi using the emulator's input Jacobian.  Inverse
UQ repeats the estimation for Sobol-perturbed measurements, and forward UQ
pushes the resulting input samples through a post-intervention emulator.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .sampling import sobol_sequence

logger = logging.getLogger(__name__)

INTERVENTION = {"D_shunt": 1.0, "k_shunt": 3.0}


class EstimationError(RuntimeError):
    pass


# -------------------------------------------------------------- transforms
def _check_bounds(lo, hi):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(~(hi > lo)):
        raise ValueError("bounds need lo < hi for every input")
    return lo, hi


def constrain(psi, lo, hi, kappa: float = 1.0):
    lo, hi = _check_bounds(lo, hi)
    return lo + (hi - lo) / (1.0 + np.exp(-kappa * np.asarray(psi, dtype=float)))


def unconstrain(x, lo, hi, kappa: float = 1.0):
    lo, hi = _check_bounds(lo, hi)
    x = np.asarray(x, dtype=float)
    if np.any(x <= lo) or np.any(x >= hi):
        raise ValueError("unconstrain needs lo < x < hi")
    return -np.log((hi - lo) / (x - lo) - 1.0) / kappa


def constrain_derivative(psi, lo, hi, kappa: float = 1.0):
    s = 1.0 / (1.0 + np.exp(-kappa * np.asarray(psi, dtype=float)))
    return kappa * (np.asarray(hi, float) - np.asarray(lo, float)) * s * (1.0 - s)


@dataclass
class BoundsTransform:
    lo: np.ndarray
    hi: np.ndarray
    kappa: float = 1.0

    def __call__(self, psi):
        return constrain(psi, self.lo, self.hi, self.kappa)

    def inverse(self, x):
        return unconstrain(x, self.lo, self.hi, self.kappa)


def estimation_error(x_est, x_ref, bounds) -> np.ndarray:
    """Signed error in percent of each parameter's range."""
    b = np.asarray(bounds, dtype=float)
    width = b[..., 1] - b[..., 0]
    if np.any(width == 0):
        raise ValueError("zero-width bounds")
    return 100.0 * (np.asarray(x_est, float) - np.asarray(x_ref, float)) / width


# -------------------------------------------------------------- measurements
@dataclass
class Datum:
    name: str
    value: float
    unit: str = ""
    rel_error: float = 0.0


@dataclass
class MeasurementSpec:
    data: list

    def __post_init__(self):
        for d in self.data:
            if d.rel_error < 0:
                raise ValueError(f"negative error half-width for {d.name}")

    @property
    def names(self) -> tuple:
        return tuple(d.name for d in self.data)

    @property
    def values(self) -> np.ndarray:
        return np.array([d.value for d in self.data])

    @property
    def rel_errors(self) -> np.ndarray:
        return np.array([d.rel_error for d in self.data])

    def scaled(self, factor: float) -> "MeasurementSpec":
        return MeasurementSpec([Datum(d.name, d.value, d.unit, d.rel_error * factor) for d in self.data])

    @classmethod
    def from_mapping(cls, doc) -> "MeasurementSpec":
        rows = doc["measurements"] if isinstance(doc, Mapping) else doc
        if isinstance(rows, Mapping):
            # name-keyed form: {P_pa_mean: {value: 85, unit: mmHg, rel_error: 0.025}}
            rows = [dict(v, name=k) for k, v in rows.items()]
        return cls([Datum(str(r["name"]), float(r["value"]), str(r.get("unit", "")), float(r.get("rel_error", 0.0)))
                    for r in rows])

    @classmethod
    def load(cls, path) -> "MeasurementSpec":
        import yaml
        text = Path(path).read_text(encoding="utf-8")
        return cls.from_mapping(yaml.safe_load(text))

    def to_mapping(self) -> dict:
        return {"measurements": [{"name": d.name, "value": d.value, "unit": d.unit, "rel_error": d.rel_error}
                                 for d in self.data]}


def reference_measurements() -> MeasurementSpec:
    """Example pulmonary-hypertension patient shipped with the package."""
    return MeasurementSpec.load(Path(__file__).parent / "data" / "patient_pah.yaml")


# -------------------------------------------------------------- estimation
@dataclass
class EstimatorConfig:
    learning_rate: float = 1e-2
    decay_every: int = 10_000
    decay_factor: float = 0.5
    max_iter: int = 50_000
    tol: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    kappa: float = 1.0
    weighting: str = "relative"      # or "scaled"
    init: str = "zero"               # or "random"
    seed: Optional[int] = 0
    trace_stride: int = 100

    def __post_init__(self):
        if self.weighting not in ("relative", "scaled"):
            raise ValueError("weighting must be 'relative' or 'scaled'")
        if self.init not in ("zero", "random"):
            raise ValueError("init must be 'zero' or 'random'")
        if self.max_iter < 1 or self.learning_rate <= 0:
            raise ValueError("max_iter and learning_rate must be positive")


@dataclass
class ParameterEstimate:
    x_est: np.ndarray
    psi_final: np.ndarray
    misfit: np.ndarray
    scaled_misfit: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    trace_iterations: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    loss_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def member(self, j: int) -> "ParameterEstimate":
        return ParameterEstimate(self.x_est[j], self.psi_final[j], self.misfit[j], self.scaled_misfit[j],
                                 self.iterations[j], self.converged[j], self.trace_iterations,
                                 self.trace[:, j] if self.trace.size else self.trace,
                                 self.loss_trace[:, j] if self.loss_trace.size else self.loss_trace)


def _output_columns(emulator, names: Optional[Sequence[str]], m_target: int) -> np.ndarray:
    if names is None:
        if m_target != emulator.n_outputs_:
            raise EstimationError("target length differs from the emulator output count")
        return np.arange(m_target)
    known = getattr(emulator.output_scaler_, "names", None) or ()
    missing = [n for n in names if n not in known]
    if missing:
        raise EstimationError(f"emulator has no outputs named {missing}")
    return np.array([list(known).index(n) for n in names])


def _value_and_jacobian(emulator, X):
    if hasattr(emulator, "predict_with_jacobian"):
        return emulator.predict_with_jacobian(X)
    if not hasattr(emulator, "jacobian"):
        raise EstimationError(f"{type(emulator).__name__} provides no input gradient")
    Y = np.asarray(emulator.predict(X), dtype=float).reshape(X.shape[0], -1)
    return Y, emulator.jacobian(X)


def estimate_parameters(emulator, y_target, bounds, config: EstimatorConfig = EstimatorConfig(),
                        output_names: Optional[Sequence[str]] = None, psi0=None,
                        weights=None) -> ParameterEstimate:
    """Adam on sum_k w_k (yhat_k(x(psi)) - y_k)^2 for one target or a batch.

    ``y_target`` is (m,) or (n, m); each row is solved independently (the
    batch only vectorises the arithmetic).  The returned estimate is the
    best-so-far iterate of each row.
    """
    Yt = np.asarray(y_target, dtype=float)
    single = Yt.ndim == 1
    Yt = np.atleast_2d(Yt)
    B, m = Yt.shape
    bounds = np.asarray(bounds, dtype=float)
    lo, hi = _check_bounds(bounds[:, 0], bounds[:, 1])
    d = lo.size
    if d != emulator.n_features_in_:
        raise EstimationError(f"bounds given for {d} inputs, emulator takes {emulator.n_features_in_}")
    cols = _output_columns(emulator, output_names, m)
    std_y = emulator.output_scaler_.std_[cols]
    if weights is not None:
        W = np.broadcast_to(np.asarray(weights, dtype=float), (B, m)).copy()
    elif config.weighting == "relative":
        if np.any(Yt == 0):
            raise EstimationError("relative weighting needs non-zero targets")
        W = 1.0 / Yt ** 2
    else:
        W = np.broadcast_to(1.0 / std_y ** 2, (B, m)).copy()
    if psi0 is not None:
        psi = np.broadcast_to(np.asarray(psi0, dtype=float), (B, d)).copy()
    elif config.init == "random":
        psi = np.random.default_rng(config.seed).standard_normal((B, d))
    else:
        psi = np.zeros((B, d))
    mom = np.zeros((B, d))
    vel = np.zeros((B, d))
    active = np.ones(B, dtype=bool)
    best_loss = np.full(B, np.inf)
    best_psi = psi.copy()
    iters = np.zeros(B, dtype=int)
    trace_it, trace_x, trace_l = [], [], []
    b1, b2 = config.beta1, config.beta2
    for it in range(config.max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        x = constrain(psi[idx], lo, hi, config.kappa)
        Yh, J = _value_and_jacobian(emulator, x)
        Yh = Yh[:, cols]
        J = J[:, cols, :]
        r = Yh - Yt[idx]
        loss = np.sum(W[idx] * r * r, axis=1)
        if not np.all(np.isfinite(loss)):
            bad = idx[~np.isfinite(loss)]
            raise EstimationError(f"non-finite misfit at iteration {it} for rows {bad[:5].tolist()}")
        better = loss < best_loss[idx]
        best_loss[idx[better]] = loss[better]
        best_psi[idx[better]] = psi[idx[better]]
        if config.trace_stride and it % config.trace_stride == 0:
            trace_it.append(it)
            trace_x.append(constrain(best_psi, lo, hi, config.kappa))
            trace_l.append(best_loss.copy())
        done = loss < config.tol
        if it == config.max_iter:
            iters[idx] = it
            break
        if np.any(done):
            iters[idx[done]] = it
            active[idx[done]] = False
        keep = ~done
        idx, r, J = idx[keep], r[keep], J[keep]
        if idx.size == 0:
            break
        g_x = np.einsum("bk,bkd->bd", 2.0 * W[idx] * r, J)
        g = g_x * constrain_derivative(psi[idx], lo, hi, config.kappa)
        t = it + 1
        lr = config.learning_rate * config.decay_factor ** (it // config.decay_every)
        mom[idx] = b1 * mom[idx] + (1.0 - b1) * g
        vel[idx] = b2 * vel[idx] + (1.0 - b2) * g * g
        psi[idx] -= lr * (mom[idx] / (1.0 - b1 ** t)) / (np.sqrt(vel[idx] / (1.0 - b2 ** t)) + config.epsilon)
    x_best = constrain(best_psi, lo, hi, config.kappa)
    Yb = np.asarray(emulator.predict(x_best), dtype=float).reshape(B, -1)[:, cols]
    scaled = np.mean(((Yb - Yt) / std_y) ** 2, axis=1)
    est = ParameterEstimate(x_best, best_psi, best_loss, scaled, iters, best_loss < config.tol,
                            np.array(trace_it, dtype=int), np.array(trace_x), np.array(trace_l))
    return est.member(0) if single else est


# ---------------------------------------------------------------------- UQ
def running_moments(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative mean and (population) variance after each sample."""
    S = np.asarray(samples, dtype=float)
    k = np.arange(1, S.shape[0] + 1)[:, None]
    mean = np.cumsum(S, axis=0) / k
    var = np.maximum(np.cumsum(S * S, axis=0) / k - mean ** 2, 0.0)
    return mean, var


def trace_drift(trace: np.ndarray, fraction: float = 0.25, scale=None) -> np.ndarray:
    """max |t_k - t_final| / |t_final| over the last ``fraction`` of a trace, per column."""
    T = np.asarray(trace, dtype=float)
    start = int(np.floor((1.0 - fraction) * T.shape[0]))
    tail = T[start:]
    ref = np.abs(T[-1]) if scale is None else np.asarray(scale, dtype=float)
    ref = np.where(ref > 0, ref, 1.0)
    return np.max(np.abs(tail - T[-1]), axis=0) / ref


@dataclass
class InverseUqResult:
    input_samples: np.ndarray
    targets: np.ndarray
    misfit: np.ndarray
    running_mean: np.ndarray
    running_variance: np.ndarray
    input_names: tuple
    failed: np.ndarray

    @property
    def mean_drift(self) -> np.ndarray:
        return trace_drift(self.running_mean)

    @property
    def variance_drift(self) -> np.ndarray:
        return trace_drift(self.running_variance)

    def converged(self, tol: float = 0.01) -> np.ndarray:
        return (self.mean_drift < tol) & (self.variance_drift < tol)


def perturbed_targets(spec: MeasurementSpec, n: int, seed: Optional[int] = 0) -> np.ndarray:
    """Measurements perturbed uniformly within their half-widths (Sobol draws)."""
    u = sobol_sequence(len(spec.data), n, seed)
    return spec.values * (1.0 + spec.rel_errors * (2.0 * u - 1.0))


def inverse_uq(emulator, spec: MeasurementSpec, bounds, n_samples: int = 2048, seed: Optional[int] = 0,
               config: EstimatorConfig = EstimatorConfig(), input_names: Sequence[str] = (),
               max_failure_fraction: float = 0.05) -> InverseUqResult:
    if n_samples < 64:
        raise ValueError("inverse UQ needs at least 64 samples")
    if n_samples & (n_samples - 1):
        logger.warning("n_samples=%d is not a power of two", n_samples)
    targets = perturbed_targets(spec, n_samples, seed)
    est = estimate_parameters(emulator, targets, bounds, config, output_names=spec.names)
    failed = np.flatnonzero(~np.isfinite(est.misfit) | np.any(~np.isfinite(est.x_est), axis=1))
    if failed.size > max_failure_fraction * n_samples:
        raise EstimationError(f"{failed.size} of {n_samples} estimations failed")
    ok = np.setdiff1d(np.arange(n_samples), failed)
    X = est.x_est[ok]
    mean, var = running_moments(X)
    return InverseUqResult(X, targets[ok], est.misfit[ok], mean, var, tuple(input_names), failed)


@dataclass
class UqResult:
    input_samples: np.ndarray
    predictions: np.ndarray
    output_names: tuple
    histograms: dict
    overrides: dict
    uniformity_pvalues: dict = field(default_factory=dict)
    running_mean: Optional[np.ndarray] = None
    running_variance: Optional[np.ndarray] = None


def fd_histogram(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Histogram with Freedman-Diaconis bins; a degenerate sample gives one bin."""
    v = np.asarray(values, dtype=float)
    if np.ptp(v) == 0:
        return np.array([v.size]), np.array([v[0] - 0.5, v[0] + 0.5])
    edges = np.histogram_bin_edges(v, bins="fd")
    counts, edges = np.histogram(v, bins=edges)
    return counts, edges


def uniformity_pvalue(counts: np.ndarray, edges: np.ndarray) -> float:
    """Chi-square test of the counts against a uniform density over the bins."""
    if counts.size < 2:
        return 1.0
    width = np.diff(edges)
    expected = counts.sum() * width / width.sum()
    return float(stats.chisquare(counts, expected).pvalue)


def forward_uq(input_samples: np.ndarray, input_names: Sequence[str], emulator, emulator_inputs: Sequence[str],
               overrides: Optional[Mapping[str, float]] = None) -> UqResult:
    """Predict post-intervention outputs for every inverse-UQ sample.

    Columns of the post-intervention emulator are filled from the samples by
    name; ``overrides`` fix the intervention parameters for all samples.
    """
    overrides = dict(INTERVENTION if overrides is None else overrides)
    unknown = [k for k in overrides if k not in emulator_inputs]
    if unknown:
        raise ValueError(f"override names not among the emulator inputs: {unknown}")
    S = np.atleast_2d(np.asarray(input_samples, dtype=float))
    n = S.shape[0]
    X = np.empty((n, len(emulator_inputs)))
    for j, name in enumerate(emulator_inputs):
        if name in overrides:
            X[:, j] = overrides[name]
        elif name in input_names:
            X[:, j] = S[:, list(input_names).index(name)]
        else:
            raise ValueError(f"emulator input {name!r} is neither sampled nor overridden")
    Y = np.asarray(emulator.predict(X), dtype=float).reshape(n, -1)
    names = tuple(getattr(emulator.output_scaler_, "names", None) or (f"y{k}" for k in range(Y.shape[1])))
    hists, pvals = {}, {}
    for k, name in enumerate(names):
        counts, edges = fd_histogram(Y[:, k])
        hists[name] = (counts, edges)
        pvals[name] = uniformity_pvalue(counts, edges)
    mean, var = running_moments(Y)
    return UqResult(S, Y, names, hists, overrides, pvals, mean, var)


def write_uq(result: UqResult, out_dir, inverse: Optional[InverseUqResult] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def table(path, header, rows):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(header) + "\n")
            for r in rows:
                fh.write(",".join(f"{v:.17g}" for v in r) + "\n")

    in_names = list(inverse.input_names) if inverse is not None and inverse.input_names else [
        f"x{j}" for j in range(result.input_samples.shape[1])]
    table(out / "input_samples.csv", in_names, result.input_samples)
    table(out / "predictions.csv", list(result.output_names), result.predictions)
    hist_dir = out / "histograms"
    hist_dir.mkdir(exist_ok=True)
    for name, (counts, edges) in result.histograms.items():
        table(hist_dir / f"{name.replace(':', '_')}.csv", ["left", "right", "count"],
              [(edges[i], edges[i + 1], counts[i]) for i in range(counts.size)])
    if inverse is not None:
        k = np.arange(1, inverse.running_mean.shape[0] + 1)[:, None]
        table(out / "convergence.csv", ["sample"] + [f"mean_{n}" for n in in_names] + [f"var_{n}" for n in in_names],
              np.hstack([k, inverse.running_mean, inverse.running_variance]))
    meta = {"overrides": result.overrides, "uniformity_pvalues": result.uniformity_pvalues}
    (out / "uq_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out
