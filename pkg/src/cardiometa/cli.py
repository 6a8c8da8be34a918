"""Command-line entry point: ``cardiometa <command> [options]``.

Every command accepts ``--config FILE`` (YAML or JSON mapping, optionally
with one section per command); explicit flags override config values.  The
effective configuration is hashed and the hash plus seed are stamped into
every artifact.  Exit codes: 2 usage/parse, 3 solver, 4 I/O, 5 stale
upstream artifact, 1 anything else.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger("cardiometa")

WORKERS_ENV = "CARDIOMETA_WORKERS"
EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_SOLVER, EXIT_IO, EXIT_STALE = 0, 1, 2, 3, 4, 5
# options that do not influence results and stay out of the config hash
UNHASHED = {"config", "out", "workers", "verbose", "command"}


class UsageError(ValueError):
    pass


class StaleArtifactError(RuntimeError):
    pass


# ------------------------------------------------------------------ config
def _read_config(path) -> dict:
    import yaml
    text = Path(path).read_text(encoding="utf-8")
    doc = yaml.safe_load(text) or {}
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    return doc


def _merge(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file (top level, then command section) < flags."""
    flags = {k: v for k, v in vars(args).items() if v is not None}
    merged = dict(defaults)
    if flags.get("config"):
        doc = _read_config(flags["config"])
        section = doc.get(args.command, {}) if isinstance(doc.get(args.command), dict) else {}
        top = {k: v for k, v in doc.items() if not isinstance(v, dict)}
        for k, v in list(top.items()) + list(section.items()):
            key = k.replace("-", "_")
            if key not in defaults:
                raise UsageError(f"unknown config key {k!r} for {args.command}")
            merged[key] = v
    merged.update(flags)
    merged["command"] = args.command
    return merged


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k not in UNHASHED}
    text = json.dumps(body, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _stamp(cfg: dict) -> str:
    return f"cardiometa {cfg['command']} config_hash={cfg['hash']} seed={cfg['seed']}"


def _provenance(cfg: dict) -> dict:
    return {"command": cfg["command"], "config_hash": cfg["hash"], "seed": cfg["seed"]}


# ------------------------------------------------------------------ output
class OutputDir:
    """Stage files in a sibling directory and move them into place at the end."""

    def __init__(self, target, cfg: dict):
        self.target = Path(target)
        self.cfg = cfg
        self.stage = self.target.with_name(f".{self.target.name}.partial-{os.getpid()}")
        if self.stage.exists():
            shutil.rmtree(self.stage)
        self.stage.mkdir(parents=True)

    def path(self, name: str) -> Path:
        p = self.stage / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def _stamp_files(self) -> None:
        line = f"# {_stamp(self.cfg)}\n"
        for p in sorted(self.stage.rglob("*")):
            if p.suffix in (".csv", ".txt"):
                p.write_text(line + p.read_text(encoding="utf-8"), encoding="utf-8")
            elif p.suffix == ".json":
                doc = json.loads(p.read_text(encoding="utf-8"))
                if doc.get("format") == "cardiometa-model":
                    continue
                doc["provenance"] = _provenance(self.cfg)
                p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def commit(self) -> Path:
        self._stamp_files()
        if not self.target.exists():
            self.stage.rename(self.target)
            return self.target
        for p in sorted(self.stage.rglob("*")):
            if p.is_file():
                dest = self.target / p.relative_to(self.stage)
                dest.parent.mkdir(parents=True, exist_ok=True)
                os.replace(p, dest)
        shutil.rmtree(self.stage)
        return self.target

    def abort(self) -> None:
        shutil.rmtree(self.stage, ignore_errors=True)


def _write_table(path, header, rows, fmt="{:.17g}") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(v if isinstance(v, str) else fmt.format(v) for v in r) + "\n")


# ------------------------------------------------------------------ inputs
def _load_net(spec: str, drop_group: Optional[str] = None):
    from .circuit.netlist import load_netlist, reference_netlist
    p = Path(spec)
    if p.exists():
        net = load_netlist(p)
    elif "/" not in spec:
        try:
            net = reference_netlist(spec)
        except FileNotFoundError:
            raise FileNotFoundError(f"netlist not found: {spec}") from None
    else:
        raise FileNotFoundError(f"netlist not found: {spec}")
    return net.without_group(drop_group) if drop_group else net


def _parse_assignments(text: Optional[str]) -> dict:
    out = {}
    if not text:
        return out
    for item in str(text).split(","):
        if not item.strip():
            continue
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"expected name=value, got {item!r}")
        try:
            out[key.strip()] = float(val)
        except ValueError:
            out[key.strip()] = val.strip()
    return out


def _load_dataset_checked(path):
    from .sampling import load_dataset
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return load_dataset(path)


def _dataset_sha(ds) -> str:
    return ds.meta.get("data_sha256", "")


def _load_model(path, dataset=None):
    from .emulators import load_emulator
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    model = load_emulator(path)
    if dataset is not None:
        want = model.metadata_.get("dataset_sha256")
        have = _dataset_sha(dataset)
        if want and have and want != have:
            raise StaleArtifactError(f"{path} was trained on a different dataset ({want[:12]} vs {have[:12]}); "
                                     "retrain the model")
    return model


def _model_bounds(model) -> tuple[np.ndarray, tuple]:
    ranges = model.metadata_.get("input_ranges")
    if not ranges:
        raise UsageError("model file carries no input ranges")
    names = tuple(model.input_scaler_.names or ranges.keys())
    return np.array([ranges[n] for n in names], dtype=float), names


# ---------------------------------------------------------------- commands
def cmd_simulate(cfg: dict) -> None:
    from .circuit.dae import assemble_dae
    from .solver import SolverConfig, extract_biomarkers, run_to_periodic
    from .solver.biomarkers import format_biomarkers, write_trajectory_csv

    net = _load_net(cfg["netlist"], cfg.get("drop_group"))
    values = {}
    if cfg["params"] not in (None, "nominal"):
        doc = _read_config(cfg["params"])
        values.update({k: float(v) for k, v in doc.items()})
    values.update({k: float(v) for k, v in _parse_assignments(cfg.get("set")).items()})
    unknown = [k for k in values if k not in net.parameters]
    if unknown:
        raise UsageError(f"unknown parameters: {unknown}")
    system = assemble_dae(net, values, use_nominal=True)
    cycle = run_to_periodic(system, SolverConfig(dt=cfg["dt"], method=cfg["method"]))
    out = OutputDir(cfg["out"], cfg)
    try:
        write_trajectory_csv(out.path("trajectory.csv"), cycle)
        bm = extract_biomarkers(cycle, net.outputs)
        out.path("biomarkers.txt").write_text(format_biomarkers(bm), encoding="utf-8")
        if net.transport:
            from .transport import TransportSpec, simulate_tracer
            sig = simulate_tracer(cycle, TransportSpec.from_netlist(net, values))
            sig.to_csv(out.path("signal.csv"))
    except BaseException:
        out.abort()
        raise
    out.commit()
    print(format_biomarkers(bm), end="")


def cmd_dataset(cfg: dict) -> None:
    from .sampling import design_from_netlist, generate_dataset, save_dataset, sobol_sequence

    net = _load_net(cfg["netlist"], cfg.get("drop_group"))
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    if cfg["design"] == "saltelli":
        design = design_from_netlist(net, cfg["n"], seed=cfg["seed"], second_order=not cfg["first_order"])
    else:
        params = net.sampled_parameters()
        lo = np.array([p.low for p in params])
        hi = np.array([p.high for p in params])
        design = (lo + sobol_sequence(len(params), cfg["n"], cfg["seed"]) * (hi - lo), [p.name for p in params])
    ds = generate_dataset(net, design, workers=workers, chunk_size=cfg["chunk_size"],
                          solver={"dt": cfg["dt"]}, transport=bool(net.transport), seed=cfg["seed"])
    ds.meta.update(_provenance(cfg))
    target = Path(cfg["out"])
    save_dataset(ds, target, comment=_stamp(cfg))
    print(f"{ds.n} rows ({len(ds.failed_rows)} failed) -> {target}")


def _emulator_from_cfg(cfg: dict):
    from .emulators import make_emulator
    params = _parse_assignments(cfg.get("param"))
    for k, v in list(params.items()):
        if isinstance(v, float) and v.is_integer() and k not in ("learning_rate", "epsilon", "noise_variance"):
            params[k] = int(v)
        if k == "hidden" and isinstance(v, str):
            params[k] = tuple(int(h) for h in v.split(":"))
    if cfg["emulator"] in ("ffnn", "sequence") and "seed" not in params:
        params["seed"] = cfg["seed"]
    return make_emulator(cfg["emulator"], **params)


def cmd_train(cfg: dict) -> None:
    from .sampling import split_normalize

    ds = _load_dataset_checked(cfg["dataset"])
    split = split_normalize(ds, cfg["test_fraction"], cfg["seed"])
    train = split.train
    if cfg.get("train_size"):
        if cfg["train_size"] > train.n:
            raise UsageError(f"train_size {cfg['train_size']} exceeds the {train.n} training rows")
        train = train.subset(np.arange(cfg["train_size"]))
    model = _emulator_from_cfg(cfg)
    model.fit(train.inputs, train.outputs, ds.input_names, ds.output_names)
    meta = dict(_provenance(cfg), dataset=Path(cfg["dataset"]).name, dataset_sha256=_dataset_sha(ds),
                netlist_hash=ds.meta.get("netlist_hash"), input_ranges=ds.meta.get("ranges"),
                test_fraction=cfg["test_fraction"], split_seed=cfg["seed"], train_rows=train.n)
    target = Path(cfg["out"])
    tmp = target.with_name(target.name + ".tmp")
    model.save(tmp, metadata=meta)
    os.replace(tmp, target)
    print(f"trained {cfg['emulator']} on {train.n} rows -> {target}")


def cmd_evaluate(cfg: dict) -> None:
    from .analysis import max_rel_error, q2
    from .sampling import split_normalize

    ds = _load_dataset_checked(cfg["dataset"])
    model = _load_model(cfg["model"], ds)
    md = model.metadata_
    split = split_normalize(ds, md.get("test_fraction", 0.2), md.get("split_seed", 0))
    pred = np.asarray(model.predict(split.test.inputs)).reshape(split.test.n, -1)
    q = q2(split.test.outputs, pred)
    e = max_rel_error(split.test.outputs, pred)
    out = OutputDir(cfg["out"], cfg)
    try:
        _write_table(out.path("metrics.csv"), ["output", "q2", "max_rel_error"],
                     [(n, q[k], e[k]) for k, n in enumerate(ds.output_names)])
    except BaseException:
        out.abort()
        raise
    out.commit()
    for k, n in enumerate(ds.output_names):
        print(f"{n:>14s}  Q2={q[k]:.4f}  max_rel_err={e[k]:.4f}")


def cmd_sobol(cfg: dict) -> None:
    from .analysis import mc_sobol

    model = _load_model(cfg["model"])
    bounds, names = _model_bounds(model)
    if cfg["method"] == "pce":
        if not hasattr(model, "sobol_indices"):
            raise UsageError("--method pce needs a PCE model file")
        si = model.sobol_indices()
        si.input_names = names
        si.output_names = tuple(model.output_scaler_.names or ())
    else:
        si = mc_sobol(model, bounds, N=cfg["n"], seed=cfg["seed"], input_names=names,
                      output_names=tuple(model.output_scaler_.names or ()))
    out = OutputDir(cfg["out"], cfg)
    try:
        si.to_csv(out.path("sobol.csv"))
    except BaseException:
        out.abort()
        raise
    out.commit()
    print(f"indices for {len(names)} inputs -> {cfg['out']}")


def cmd_morris(cfg: dict) -> None:
    from .analysis import morris_screen

    model = _load_model(cfg["model"])
    bounds, names = _model_bounds(model)
    res = morris_screen(model, bounds, r=cfg["r"], levels=cfg["levels"], seed=cfg["seed"], input_names=names)
    outs = tuple(model.output_scaler_.names or (f"y{k}" for k in range(res.mu_star.shape[0])))
    rows = [(o, n, res.mu_star[k, i], res.sigma[k, i], res.mu[k, i])
            for k, o in enumerate(outs) for i, n in enumerate(names)]
    out = OutputDir(cfg["out"], cfg)
    try:
        _write_table(out.path("morris.csv"), ["output", "input", "mu_star", "sigma", "mu"], rows)
    except BaseException:
        out.abort()
        raise
    out.commit()
    print(f"{res.evaluations} model evaluations -> {cfg['out']}")


def _measurements(cfg: dict):
    from .inversion import MeasurementSpec, reference_measurements
    if not cfg.get("measurements"):
        return reference_measurements()
    p = Path(cfg["measurements"])
    if not p.exists():
        raise FileNotFoundError(f"measurement file not found: {p}")
    return MeasurementSpec.load(p)


def _estimator_config(cfg: dict):
    from .inversion import EstimatorConfig
    return EstimatorConfig(learning_rate=cfg["learning_rate"], max_iter=cfg["max_iter"], tol=cfg["tol"],
                           weighting=cfg["weighting"], init=cfg["init"], seed=cfg["seed"],
                           trace_stride=cfg["trace_stride"])


def cmd_estimate(cfg: dict) -> None:
    from .inversion import estimate_parameters, estimation_error

    model = _load_model(cfg["model"])
    bounds, names = _model_bounds(model)
    spec = _measurements(cfg)
    est = estimate_parameters(model, spec.values, bounds, _estimator_config(cfg), output_names=spec.names)
    reference = _parse_assignments(cfg.get("reference"))
    out = OutputDir(cfg["out"], cfg)
    try:
        header = ["input", "estimate", "low", "high"]
        rows = [[n, est.x_est[j], bounds[j, 0], bounds[j, 1]] for j, n in enumerate(names)]
        if reference:
            missing = [n for n in names if n not in reference]
            if missing:
                raise UsageError(f"reference values missing for {missing}")
            ref = np.array([float(reference[n]) for n in names])
            err = estimation_error(est.x_est, ref, bounds)
            header += ["reference", "error_percent"]
            rows = [r + [ref[j], err[j]] for j, r in enumerate(rows)]
        _write_table(out.path("estimate.csv"), header, rows)
        _write_table(out.path("trace.csv"), ["iteration", "loss"] + list(names),
                     [[it, est.loss_trace[k]] + list(est.trace[k]) for k, it in enumerate(est.trace_iterations)])
        out.path("summary.txt").write_text(
            f"misfit={est.misfit:.17g}\nscaled_misfit={est.scaled_misfit:.17g}\niterations={int(est.iterations)}\n"
            f"converged={bool(est.converged)}\n", encoding="utf-8")
    except BaseException:
        out.abort()
        raise
    out.commit()
    for j, n in enumerate(names):
        print(f"{n:>10s} = {est.x_est[j]:.6g}")
    print(f"misfit {est.misfit:.3e} after {int(est.iterations)} iterations")


def cmd_uq(cfg: dict) -> None:
    from .inversion import INTERVENTION, forward_uq, inverse_uq, write_uq

    pre = _load_model(cfg["model_pre"])
    post = _load_model(cfg["model_post"])
    bounds, names = _model_bounds(pre)
    spec = _measurements(cfg)
    overrides = _parse_assignments(cfg.get("override")) or dict(INTERVENTION)
    inv = inverse_uq(pre, spec, bounds, n_samples=cfg["n_samples"], seed=cfg["seed"],
                     config=_estimator_config(cfg), input_names=names)
    post_inputs = tuple(post.input_scaler_.names or ())
    res = forward_uq(inv.input_samples, names, post, post_inputs, overrides)
    out = OutputDir(cfg["out"], cfg)
    try:
        write_uq(res, out.stage, inv)
    except BaseException:
        out.abort()
        raise
    out.commit()
    drift_ok = inv.converged()
    print(f"{inv.input_samples.shape[0]} accepted samples; traces converged for "
          f"{int(drift_ok.sum())}/{drift_ok.size} inputs")
    for name, p in res.uniformity_pvalues.items():
        print(f"{name:>14s}  uniformity p={p:.3g}")


def cmd_report(cfg: dict) -> None:
    from .analysis import compare_report
    from .emulators import make_emulator

    ds = _load_dataset_checked(cfg["dataset"])
    labels = [s.strip() for s in cfg["emulators"].split(",") if s.strip()]
    sizes = [int(s) for s in str(cfg["sizes"]).split(",") if s.strip()]
    params = {"ffnn": {"seed": cfg["seed"]}, "sequence": {"seed": cfg["seed"]}}
    emulators = {lab: make_emulator(lab, **params.get(lab, {})) for lab in labels}
    out = OutputDir(cfg["out"], cfg)
    try:
        report = compare_report(ds, emulators, sizes, cfg["test_fraction"], cfg["seed"], out_dir=out.stage)
    except BaseException:
        out.abort()
        raise
    out.commit()
    for s in report.summary():
        print(f"{s['emulator']:>8s} n={s['train_size']:>6d}  Q2 min={s['q2_min']:.4f} mean={s['q2_mean']:.4f}")


COMMANDS = {
    "simulate": (cmd_simulate, "solve one netlist to a periodic steady state"),
    "dataset": (cmd_dataset, "run the solver on a quasi-random design"),
    "train": (cmd_train, "fit an emulator on a dataset"),
    "evaluate": (cmd_evaluate, "test-set Q2 and maximum relative error of a model"),
    "sobol": (cmd_sobol, "Sobol indices from a trained model"),
    "morris": (cmd_morris, "Morris elementary-effects screening of a model"),
    "estimate": (cmd_estimate, "estimate inputs from measurements"),
    "uq": (cmd_uq, "inverse UQ from measurements, then forward prediction"),
    "report": (cmd_report, "compare emulators over training-set sizes"),
}

DEFAULTS = {
    "simulate": {"netlist": None, "params": "nominal", "set": None, "dt": 1e-3, "method": "backward-euler-newton",
                 "drop_group": None, "seed": 0, "out": "simulate-out"},
    "dataset": {"netlist": None, "n": 512, "design": "saltelli", "first_order": False, "dt": 1e-3,
                "chunk_size": 256, "drop_group": None, "seed": 0, "out": "dataset.csv.gz"},
    "train": {"dataset": None, "emulator": "ffnn", "param": None, "train_size": None, "test_fraction": 0.2,
              "seed": 0, "out": "model.json"},
    "evaluate": {"model": None, "dataset": None, "seed": 0, "out": "evaluate-out"},
    "sobol": {"model": None, "method": "mc", "n": 4096, "seed": 0, "out": "sobol-out"},
    "morris": {"model": None, "r": 40, "levels": 8, "seed": 0, "out": "morris-out"},
    "estimate": {"model": None, "measurements": None, "reference": None, "learning_rate": 1e-2,
                 "max_iter": 50_000, "tol": 1e-8, "weighting": "relative", "init": "zero", "trace_stride": 100,
                 "seed": 0, "out": "estimate-out"},
    "uq": {"model_pre": None, "model_post": None, "measurements": None, "n_samples": 2048, "override": None,
           "learning_rate": 1e-2, "max_iter": 50_000, "tol": 1e-8, "weighting": "relative", "init": "zero",
           "trace_stride": 0, "seed": 0, "out": "uq-out"},
    "report": {"dataset": None, "emulators": "ffnn,pce,gp", "sizes": "1000,5000,10000", "test_fraction": 0.2,
               "seed": 0, "out": "report-out"},
}

REQUIRED = {"simulate": ["netlist"], "dataset": ["netlist"], "train": ["dataset"], "evaluate": ["model", "dataset"],
            "sobol": ["model"], "morris": ["model"], "estimate": ["model"], "uq": ["model_pre", "model_post"],
            "report": ["dataset"]}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cardiometa", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", default=None, help="log progress")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    def common(p, seed=True, out="output directory"):
        p.add_argument("--config", help="YAML/JSON config; flags override it")
        if seed:
            p.add_argument("--seed", type=int, help="random seed (default 0)")
        p.add_argument("--out", help=out)

    def estimator(p):
        p.add_argument("--measurements", help="measurement file (default: shipped example patient)")
        p.add_argument("--learning-rate", type=float, help="Adam step size (default 1e-2)")
        p.add_argument("--max-iter", type=int, help="iteration cap (default 50000)")
        p.add_argument("--tol", type=float, help="stop when the misfit drops below this (default 1e-8)")
        p.add_argument("--weighting", choices=["relative", "scaled"], help="misfit weights (default relative)")
        p.add_argument("--init", choices=["zero", "random"], help="starting point (default zero = mid-range)")
        p.add_argument("--trace-stride", type=int, help="iterations between trace rows")

    helps = {k: v[1] for k, v in COMMANDS.items()}
    p = sub.add_parser("simulate", help=helps["simulate"], description=helps["simulate"])
    p.add_argument("netlist", nargs="?", help="netlist file or shipped stem (model2_pah)")
    p.add_argument("--params", help="'nominal' or a YAML mapping of parameter values")
    p.add_argument("--set", help="comma-separated name=value overrides")
    p.add_argument("--dt", type=float, help="time step in s (default 1e-3)")
    p.add_argument("--method", choices=["backward-euler-newton", "rk4-with-projection"], help="integrator")
    p.add_argument("--drop-group", help="remove an optional component group (e.g. shunt)")
    common(p)

    p = sub.add_parser("dataset", help=helps["dataset"], description=helps["dataset"])
    p.add_argument("netlist", nargs="?", help="netlist file or shipped stem")
    p.add_argument("--n", type=int, help="base sample count N (default 512)")
    p.add_argument("--design", choices=["saltelli", "sobol"], help="Saltelli block design or plain Sobol rows")
    p.add_argument("--first-order", action="store_true", default=None, help="omit the BA blocks")
    p.add_argument("--dt", type=float, help="solver step (default 1e-3)")
    p.add_argument("--chunk-size", type=int, help="rows per solver batch (default 256)")
    p.add_argument("--drop-group", help="remove an optional component group")
    common(p, out="dataset file (.csv or .csv.gz)")

    p = sub.add_parser("train", help=helps["train"], description=helps["train"])
    p.add_argument("dataset", nargs="?", help="dataset file")
    p.add_argument("--emulator", choices=["ffnn", "pce", "gp", "sequence"], help="emulator kind (default ffnn)")
    p.add_argument("--param", help="comma-separated hyperparameters, e.g. degree=3 or hidden=64:32:32")
    p.add_argument("--train-size", type=int, help="use only this many training rows")
    p.add_argument("--test-fraction", type=float, help="held-out fraction (default 0.2)")
    common(p, out="model file")

    p = sub.add_parser("evaluate", help=helps["evaluate"], description=helps["evaluate"])
    p.add_argument("model", nargs="?", help="model file")
    p.add_argument("dataset", nargs="?", help="dataset the model was trained on")
    common(p)

    p = sub.add_parser("sobol", help=helps["sobol"], description=helps["sobol"])
    p.add_argument("model", nargs="?", help="model file")
    p.add_argument("--method", choices=["mc", "pce"], help="Monte Carlo or PCE coefficients (default mc)")
    p.add_argument("--n", type=int, help="Monte Carlo base sample count (default 4096)")
    common(p)

    p = sub.add_parser("morris", help=helps["morris"], description=helps["morris"])
    p.add_argument("model", nargs="?", help="model file")
    p.add_argument("--r", type=int, help="number of trajectories (default 40)")
    p.add_argument("--levels", type=int, help="grid levels (default 8)")
    common(p)

    p = sub.add_parser("estimate", help=helps["estimate"], description=helps["estimate"])
    p.add_argument("model", nargs="?", help="differentiable model file (ffnn)")
    p.add_argument("--reference", help="known inputs name=value,... to report estimation errors")
    estimator(p)
    common(p)

    p = sub.add_parser("uq", help=helps["uq"], description=helps["uq"])
    p.add_argument("model_pre", nargs="?", help="model of the untreated circulation")
    p.add_argument("model_post", nargs="?", help="model with the intervention inputs")
    p.add_argument("--n-samples", type=int, help="perturbed measurement sets (default 2048)")
    p.add_argument("--override", help="intervention values name=value,... (default D_shunt=1,k_shunt=3)")
    estimator(p)
    common(p)

    p = sub.add_parser("report", help=helps["report"], description=helps["report"])
    p.add_argument("dataset", nargs="?", help="dataset file")
    p.add_argument("--emulators", help="comma-separated kinds (default ffnn,pce,gp)")
    p.add_argument("--sizes", help="comma-separated training sizes")
    p.add_argument("--test-fraction", type=float, help="held-out fraction (default 0.2)")
    common(p)
    for action in ap._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                sp.set_defaults(**{a.dest: None for a in sp._actions if a.dest != "help"})
    return ap


def _check_duplicates(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    seen = set()
    for tok in argv:
        if tok == "--":
            break
        if tok.startswith("--"):
            key = tok.split("=", 1)[0]
            if key in seen:
                parser.error(f"option {key} given more than once")
            seen.add(key)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _check_duplicates(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .circuit.netlist import NetlistError
    from .solver import SolverError
    try:
        cfg = _merge(args, DEFAULTS[args.command])
        missing = [k for k in REQUIRED[args.command] if not cfg.get(k)]
        if missing:
            raise UsageError(f"missing required argument(s): {', '.join(missing)}")
        if cfg.get("netlist"):
            cfg["netlist_digest"] = _load_net(cfg["netlist"], cfg.get("drop_group")).digest
        cfg["hash"] = config_hash(cfg)
        COMMANDS[args.command][0](cfg)
    except (UsageError, NetlistError) as exc:
        print(f"cardiometa {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SolverError as exc:
        print(f"cardiometa {args.command}: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except StaleArtifactError as exc:
        print(f"cardiometa {args.command}: stale artifact: {exc}", file=sys.stderr)
        return EXIT_STALE
    except OSError as exc:
        print(f"cardiometa {args.command}: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - report any other failure with a clean message
        print(f"cardiometa {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
