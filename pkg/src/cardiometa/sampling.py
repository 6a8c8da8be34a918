"""Quasi-Monte Carlo designs, dataset generation, splitting and scaling."""
from __future__ import annotations

import gzip
import hashlib
import io
import json
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import qmc

logger = logging.getLogger(__name__)

MAX_SOBOL_DIM = 21201  # direction-number table shipped with scipy


class DesignError(ValueError):
    pass


class DatasetError(RuntimeError):
    pass


# ---------------------------------------------------------------- sequences
def sobol_sequence(d: int, n: int, seed: Optional[int] = None) -> np.ndarray:
    """First ``n`` points of a ``d``-dimensional Sobol sequence in [0, 1).

    ``seed=None`` gives the plain (unscrambled) sequence starting at the
    origin; an integer seed selects an Owen scrambling.
    """
    if d < 1 or n < 1:
        raise DesignError("d and n must be at least 1")
    if d > MAX_SOBOL_DIM:
        raise DesignError(f"Sobol sequences are limited to d <= {MAX_SOBOL_DIM}")
    engine = qmc.Sobol(d, scramble=seed is not None, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        pts = engine.random(n)
    return pts


@dataclass
class DesignMatrix:
    """Saltelli sample blocks in the unit cube and their physical images."""

    unit: np.ndarray
    lows: np.ndarray
    highs: np.ndarray
    N: int
    names: tuple = ()
    second_order: bool = True
    seed: Optional[int] = None

    @property
    def d(self) -> int:
        return self.unit.shape[1]

    @property
    def rows(self) -> np.ndarray:
        return self.lows + self.unit * (self.highs - self.lows)

    @property
    def block_layout(self) -> list[tuple[str, int, int]]:
        labels = ["A", "B"] + [f"AB{i + 1}" for i in range(self.d)]
        if self.second_order:
            labels += [f"BA{i + 1}" for i in range(self.d)]
        return [(lab, k * self.N, (k + 1) * self.N) for k, lab in enumerate(labels)]

    def block(self, label: str, physical: bool = False) -> np.ndarray:
        for lab, a, b in self.block_layout:
            if lab == label:
                return (self.rows if physical else self.unit)[a:b]
        raise KeyError(label)


def saltelli_design(ranges: Sequence[Sequence[float]], N: int, seed: Optional[int] = 0,
                    second_order: bool = True, names: Sequence[str] = ()) -> DesignMatrix:
    """Blocks A, B, AB_i (A with column i from B) and, for the second-order
    layout, BA_i (B with column i from A); (2d+2)N or (d+2)N rows."""
    ranges = np.asarray(ranges, dtype=float)
    if ranges.size == 0:
        raise DesignError("empty parameter ranges")
    if ranges.ndim != 2 or ranges.shape[1] != 2:
        raise DesignError("ranges must be a list of [low, high] pairs")
    if np.any(ranges[:, 0] >= ranges[:, 1]):
        bad = int(np.flatnonzero(ranges[:, 0] >= ranges[:, 1])[0])
        raise DesignError(f"range {bad} has low >= high")
    if N < 1:
        raise DesignError("N must be positive")
    if N & (N - 1):
        warnings.warn(f"N={N} is not a power of two; Sobol balance properties are lost", stacklevel=2)
    d = ranges.shape[0]
    base = sobol_sequence(2 * d, N, seed)
    A, B = base[:, :d], base[:, d:]
    blocks = [A, B]
    for i in range(d):
        ab = A.copy()
        ab[:, i] = B[:, i]
        blocks.append(ab)
    if second_order:
        for i in range(d):
            ba = B.copy()
            ba[:, i] = A[:, i]
            blocks.append(ba)
    return DesignMatrix(np.vstack(blocks), ranges[:, 0].copy(), ranges[:, 1].copy(), N,
                        tuple(names), second_order, seed)


# ------------------------------------------------------------------- dataset
@dataclass
class Dataset:
    inputs: np.ndarray
    outputs: np.ndarray
    input_names: tuple
    output_names: tuple
    failed_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def ok_mask(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[self.failed_rows] = False
        return mask

    def clean(self) -> "Dataset":
        """Rows without solver failure."""
        m = self.ok_mask()
        return Dataset(self.inputs[m], self.outputs[m], self.input_names, self.output_names,
                       np.zeros(0, dtype=int), dict(self.meta))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.outputs[idx], self.input_names, self.output_names,
                       np.zeros(0, dtype=int), dict(self.meta))

    def select_outputs(self, names: Sequence[str]) -> "Dataset":
        cols = [self.output_names.index(n) for n in names]
        return Dataset(self.inputs, self.outputs[:, cols], self.input_names, tuple(names),
                       self.failed_rows.copy(), dict(self.meta))


def filter_outputs(dataset: Dataset, ranges) -> Dataset:
    """Keep clean rows whose outputs lie inside ``{name: (low, high)}``."""
    keep = dataset.ok_mask()
    for name, (low, high) in dict(ranges).items():
        if name not in dataset.output_names:
            raise DatasetError(f"no output named {name!r}")
        col = dataset.outputs[:, dataset.output_names.index(name)]
        keep &= (col >= low) & (col <= high)
    dropped = int(dataset.ok_mask().sum() - keep.sum())
    if dropped:
        logger.info("output range filter removed %d rows", dropped)
    return dataset.subset(np.flatnonzero(keep))


def _fmt(v: float) -> str:
    return "nan" if not np.isfinite(v) else f"{v:.17g}"


def save_dataset(dataset: Dataset, path, comment: Optional[str] = None) -> Path:
    """CSV (gzip when the name ends in ``.gz``) plus a ``.meta.json`` sidecar.

    ``comment`` is written as a leading ``#`` line (provenance stamp).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    header = [f"in:{n}" for n in dataset.input_names] + [f"out:{n}" for n in dataset.output_names]
    buf.write(",".join(header) + "\n")
    for x, y in zip(dataset.inputs, dataset.outputs):
        buf.write(",".join(_fmt(v) for v in np.concatenate([x, y])) + "\n")
    data = buf.getvalue().encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    if path.suffix == ".gz":
        with open(tmp, "wb") as raw:
            with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as gz:
                gz.write(data)
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)
    meta = dict(dataset.meta)
    meta["failed_rows"] = [int(i) for i in dataset.failed_rows]
    meta["rows"] = dataset.n
    meta["data_sha256"] = hashlib.sha256(data).hexdigest()
    side = sidecar_path(path)
    tmp = side.with_name(side.name + ".tmp")
    tmp.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, side)
    return path


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def load_dataset(path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    text = raw.decode("utf-8")
    while text.startswith("#"):
        text = text.partition("\n")[2]
    header, _, body = text.partition("\n")
    cols = header.strip().split(",")
    table = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2) if body.strip() else np.zeros((0, len(cols)))
    in_names = tuple(c[3:] for c in cols if c.startswith("in:"))
    out_names = tuple(c[4:] for c in cols if c.startswith("out:"))
    d = len(in_names)
    meta = {}
    failed = np.zeros(0, dtype=int)
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text(encoding="utf-8"))
        failed = np.asarray(meta.pop("failed_rows", []), dtype=int)
        meta.pop("rows", None)
    # the content hash is recomputed so an edited file cannot pass as the original
    digest = hashlib.sha256(raw).hexdigest()
    if meta.get("data_sha256", digest) != digest:
        logger.warning("%s does not match the hash recorded in its sidecar", path)
    meta["data_sha256"] = digest
    return Dataset(table[:, :d], table[:, d:], in_names, out_names, failed, meta)


# ---------------------------------------------------------------- generation
def _evaluate_chunk(args):
    net, input_names, rows, output_names, solver_kwargs, transport_kwargs = args
    from .circuit.dae import assemble_dae, invalid_samples, _bind_values
    from .solver import SolverConfig, run_to_periodic, extract_biomarkers

    n = rows.shape[0]
    values = {name: rows[:, j] for j, name in enumerate(input_names)}
    try:
        scope, _ = _bind_values(net, values, allow_out_of_range=True, use_nominal=True)
        bad = invalid_samples(net, scope, n)
    except (ValueError, ArithmeticError):
        bad = np.ones(n, dtype=bool)
    width = transport_kwargs["n_samples"] if transport_kwargs is not None else len(output_names)
    out = np.full((n, width), np.nan)
    good = np.flatnonzero(~bad)
    if good.size:
        system = assemble_dae(net, {k: v[good] for k, v in values.items()}, allow_out_of_range=True,
                              use_nominal=True)
        config = SolverConfig(**solver_kwargs)
        cycles = run_to_periodic(system, config, return_failures=True)
        if not isinstance(cycles, list):
            cycles = [cycles]
        if transport_kwargs is not None:
            from .transport import TransportError, TransportSpec, simulate_tracer
            ok = [j for j, cyc in enumerate(cycles) if cyc is not None and cyc.converged]
            if ok:
                tspec = TransportSpec.from_netlist(net, {k: v[good] for k, v in values.items()}).member(np.array(ok))
                try:
                    sig = simulate_tracer([cycles[j] for j in ok], tspec)
                    out[good[ok]] = np.atleast_2d(sig.values)
                except (TransportError, ValueError, ArithmeticError):
                    # fall back to one sample at a time so one bad row does not sink the chunk
                    for j in ok:
                        try:
                            out[good[j]] = simulate_tracer(cycles[j], TransportSpec.from_netlist(
                                net, {k: v[good[j:j + 1]] for k, v in values.items()})).values
                        except (TransportError, ValueError, ArithmeticError):
                            pass
            return out
        for j, (row, cyc) in enumerate(zip(good, cycles)):
            if cyc is None or not cyc.converged:
                continue
            try:
                bm = extract_biomarkers(cyc, {k: net.outputs[k] for k in output_names})
                out[row] = [bm[k] for k in output_names]
            except (ValueError, ArithmeticError, KeyError):
                out[row] = np.nan
    return out


def generate_dataset(netlist, design, output_names: Optional[Sequence[str]] = None, workers: int = 1,
                     chunk_size: int = 256, solver: Optional[dict] = None, transport: bool = False,
                     max_failure_fraction: float = 0.10, seed: Optional[int] = None,
                     progress: bool = False) -> Dataset:
    """Run the solver on every design row.

    ``design`` is a :class:`DesignMatrix` (columns named by ``design.names``
    or the netlist's sampled parameters) or a ``(rows, names)`` pair.  Rows
    are processed in fixed chunks of ``chunk_size`` so results do not depend
    on the number of workers.  Failed rows get NaN outputs and are listed in
    ``failed_rows``.
    """
    from .circuit.netlist import Netlist

    if not isinstance(netlist, Netlist):
        raise TypeError("netlist must be a parsed Netlist")
    if isinstance(design, DesignMatrix):
        rows = design.rows
        names = tuple(design.names) or tuple(p.name for p in netlist.sampled_parameters())
        ranges = np.stack([design.lows, design.highs], axis=1).tolist()
        seed = design.seed if seed is None else seed
    else:
        rows, names = design
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        names = tuple(names)
        ranges = [[netlist.parameters[n].low, netlist.parameters[n].high] for n in names]
    if len(names) != rows.shape[1]:
        raise DatasetError("design columns and parameter names differ in count")
    missing = [n for n in names if n not in netlist.parameters]
    if missing:
        raise DatasetError(f"design columns not in the netlist: {missing}")
    if transport:
        from .transport import TransportSpec
        nominal = TransportSpec.from_netlist(netlist)
        n_sig = nominal.n_samples
        transport = {"n_samples": n_sig, "duration": nominal.duration, "dt_signal": nominal.dt_signal,
                     "step": nominal.step}
        out_names = tuple(f"c{k:04d}" for k in range(n_sig))
    else:
        transport = None
        out_names = tuple(output_names) if output_names is not None else tuple(netlist.outputs)
        unknown = [n for n in out_names if n not in netlist.outputs]
        if unknown:
            raise DatasetError(f"unknown outputs {unknown}")
    solver = dict(solver or {})
    n = rows.shape[0]
    chunks = [(netlist, names, rows[a:a + chunk_size], out_names, solver, transport)
              for a in range(0, n, chunk_size)]
    results = []
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for k, res in enumerate(pool.map(_evaluate_chunk, chunks)):
                results.append(res)
                if progress:
                    logger.info("chunk %d/%d done", k + 1, len(chunks))
    else:
        for k, chunk in enumerate(chunks):
            results.append(_evaluate_chunk(chunk))
            if progress:
                logger.info("chunk %d/%d done", k + 1, len(chunks))
    outputs = np.vstack(results) if results else np.zeros((0, len(out_names)))
    failed = np.flatnonzero(~np.all(np.isfinite(outputs), axis=1))
    meta = {
        "netlist": netlist.name,
        "netlist_hash": netlist.digest,
        "seed": seed,
        "ranges": {nm: [float(a), float(b)] for nm, (a, b) in zip(names, ranges)},
        "solver": solver,
        "chunk_size": chunk_size,
    }
    if transport:
        meta["transport"] = {k: v for k, v in transport.items()}
    ds = Dataset(rows.copy(), outputs, names, out_names, failed, meta)
    if n and failed.size > max_failure_fraction * n:
        raise DatasetError(
            f"{failed.size} of {n} rows failed (> {max_failure_fraction:.0%}); first failures at rows "
            f"{failed[:10].tolist()}", )
    if failed.size:
        logger.warning("%d of %d rows failed and are excluded from training", failed.size, n)
    return ds


# ----------------------------------------------------------------- scaling
class Scaler:
    """Per-column standardisation; constant columns are rejected."""

    def __init__(self, mean=None, std=None, names=None):
        self.mean_ = None if mean is None else np.asarray(mean, dtype=float)
        self.std_ = None if std is None else np.asarray(std, dtype=float)
        self.names = tuple(names) if names is not None else None

    def fit(self, X, names=None):
        X = np.asarray(X, dtype=float)
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        names = tuple(names) if names is not None else tuple(f"column {j}" for j in range(X.shape[1]))
        const = np.flatnonzero(~(std > 1e-12 * np.maximum(1.0, np.abs(mean))))
        if const.size:
            raise ValueError(f"constant column cannot be scaled: {names[const[0]]}")
        self.mean_, self.std_, self.names = mean, std, names
        return self

    def transform(self, X):
        return (np.asarray(X, dtype=float) - self.mean_) / self.std_

    def inverse_transform(self, Z):
        return np.asarray(Z, dtype=float) * self.std_ + self.mean_

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean_], "std": [float(v) for v in self.std_],
                "names": list(self.names) if self.names else None}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"], d.get("names"))


@dataclass
class Split:
    train: Dataset
    test: Dataset
    input_scaler: Scaler
    output_scaler: Scaler
    train_index: np.ndarray
    test_index: np.ndarray


def split_normalize(dataset: Dataset, test_fraction: float = 0.2, seed: int = 0) -> Split:
    """Random disjoint train/test split of the non-failed rows; scalers are
    fitted on the training part only."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    clean_idx = np.flatnonzero(dataset.ok_mask())
    if clean_idx.size < 10:
        raise ValueError(f"dataset too small to split ({clean_idx.size} usable rows, need 10)")
    rng = np.random.default_rng(seed)
    perm = clean_idx[rng.permutation(clean_idx.size)]
    n_test = int(round(test_fraction * clean_idx.size))
    n_test = min(max(n_test, 1), clean_idx.size - 1)
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    train, test = dataset.subset(train_idx), dataset.subset(test_idx)
    in_scaler = Scaler().fit(train.inputs, dataset.input_names)
    out_scaler = Scaler().fit(train.outputs, dataset.output_names)
    return Split(train, test, in_scaler, out_scaler, train_idx, test_idx)


def design_from_netlist(netlist, N: int, seed: Optional[int] = 0, second_order: bool = True,
                        names: Optional[Sequence[str]] = None) -> DesignMatrix:
    params = netlist.sampled_parameters()
    if names is not None:
        lookup = {p.name: p for p in params}
        params = [lookup[n] for n in names]
    return saltelli_design([[p.low, p.high] for p in params], N, seed, second_order, [p.name for p in params])


def saltelli_rows(d: int, N: int, second_order: bool = True) -> int:
    return (2 * d + 2) * N if second_order else (d + 2) * N


__all__ = [
    "DesignError", "DatasetError", "DesignMatrix", "Dataset", "Scaler", "Split", "sobol_sequence",
    "saltelli_design", "generate_dataset", "split_normalize", "save_dataset", "load_dataset", "sidecar_path",
    "design_from_netlist", "saltelli_rows"
]
