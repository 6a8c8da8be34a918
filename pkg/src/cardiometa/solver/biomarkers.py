"""Scalar biomarkers from a converged cycle, and trajectory export.

A biomarker definition is ``func(signal)`` or ``ratio(signal, signal)`` where
``func`` is one of ``mean``, ``max``, ``min``, ``stroke`` (volume passed
forward per beat) and ``co`` (stroke volume times heart rate, mL/s).  A
signal is a label (``p:AO``, ``q:AV``, ``dp:SH``, ``V:LV``) or a sum/difference
of labels (``q:R_ub + q:R_lb``).
"""
from __future__ import annotations

import re
from typing import Iterable, Mapping, Union

import numpy as np

from .integrate import CycleSolution

FUNCTIONS = ("mean", "max", "min", "stroke", "co", "ratio")
_CALL = re.compile(r"^\s*([A-Za-z_]+)\s*\((.*)\)\s*$")


class BiomarkerError(ValueError):
    pass


class BiomarkerSet(dict):
    """Mapping biomarker name -> value, in definition order."""


def _signal(cycle: CycleSolution, expr: str) -> np.ndarray:
    expr = expr.strip()
    tokens = re.split(r"(\s[+-]\s)", f" {expr}")
    total = None
    sign = 1.0
    for tok in tokens:
        stripped = tok.strip()
        if stripped in ("+", "-"):
            sign = 1.0 if stripped == "+" else -1.0
            continue
        if not stripped:
            continue
        try:
            sig = cycle.signal(stripped)
        except KeyError:
            raise BiomarkerError(f"unknown signal {stripped!r}") from None
        total = sign * sig if total is None else total + sign * sig
    if total is None:
        raise BiomarkerError(f"empty signal expression {expr!r}")
    return total


def _split_args(text: str) -> list[str]:
    return [a for a in (s.strip() for s in text.split(",")) if a]


def period_mean(times: np.ndarray, values: np.ndarray) -> float:
    span = times[-1] - times[0]
    return float(np.trapezoid(values, times) / span)


def evaluate_biomarker(cycle: CycleSolution, definition: str) -> float:
    m = _CALL.match(definition)
    if not m or m.group(1) not in FUNCTIONS:
        raise BiomarkerError(f"cannot parse biomarker definition {definition!r}")
    func, args = m.group(1), _split_args(m.group(2))
    if func == "ratio":
        if len(args) != 2:
            raise BiomarkerError("ratio takes two signals")
        num = period_mean(cycle.times, _signal(cycle, args[0]))
        den = period_mean(cycle.times, _signal(cycle, args[1]))
        if den == 0.0:
            raise BiomarkerError(f"zero denominator in {definition!r}")
        return num / den
    if len(args) != 1:
        raise BiomarkerError(f"{func} takes one signal")
    sig = _signal(cycle, args[0])
    if func == "mean":
        return period_mean(cycle.times, sig)
    if func == "max":
        return float(np.max(sig))
    if func == "min":
        return float(np.min(sig))
    stroke = float(np.trapezoid(np.maximum(sig, 0.0), cycle.times))
    if func == "stroke":
        return stroke
    return float(stroke / (cycle.times[-1] - cycle.times[0]))


def extract_biomarkers(cycle: CycleSolution,
                       spec: Union[Mapping[str, str], Iterable[tuple[str, str]]]) -> BiomarkerSet:
    items = spec.items() if isinstance(spec, Mapping) else spec
    out = BiomarkerSet()
    for name, definition in items:
        out[name] = evaluate_biomarker(cycle, definition)
    return out


def write_trajectory_csv(path, cycle: CycleSolution, include_algebraic: bool = True) -> None:
    labels = list(cycle.state_labels) + (list(cycle.alg_labels) if include_algebraic else [])
    data = [cycle.times[:, None], cycle.states]
    if include_algebraic:
        data.append(cycle.algebraic)
    table = np.concatenate(data, axis=1)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(["t"] + labels) + "\n")
        for row in table:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def format_biomarkers(values: Mapping[str, float]) -> str:
    return "".join(f"{k}={v:.17g}\n" for k, v in values.items())
