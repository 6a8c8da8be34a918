"""Constitutive laws of the lumped circulation components.

Sign convention: positive flow runs from ``node_from`` to ``node_to`` and the
pressure drop is ``dp = p_from - p_to``.  Units are mmHg, mL and s.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class KindInfo:
    slots: tuple[str, ...]
    optional_slots: tuple[str, ...] = ()
    options: dict = field(default_factory=dict)
    positive: tuple[str, ...] = ()
    states: tuple[str, ...] = ()
    implicit_flow: bool = False


KINDS: dict[str, KindInfo] = {
    "Resistor": KindInfo(("R",), positive=("R",)),
    "NonlinearResistor": KindInfo(("K",), positive=("K",), implicit_flow=True),
    "PressureDependentResistor": KindInfo(
        ("R0", "sensitivity"), options={"p_ref": 0.0}, positive=("R0",)
    ),
    "Inertance": KindInfo(("L",), positive=("L",), states=("Q",)),
    "Compliance": KindInfo(("C",), positive=("C",), states=("P",)),
    "ElastanceChamber": KindInfo(
        ("E_active", "E_baseline", "V0"),
        options={"onset": 0.0, "sys_frac": 0.3, "relax_frac": 0.15},
        positive=("E_baseline",),
        states=("V",),
    ),
    "IdealValve": KindInfo((), optional_slots=("R_open",), implicit_flow=True),
    "DynamicValve": KindInfo(
        ("K", "L", "k_open", "k_close"),
        options={"s_min": 1e-3},
        positive=("K", "L", "k_open", "k_close"),
        states=("Q", "S"),
        implicit_flow=True,
    ),
    "FlowSource": KindInfo(
        ("Q_mean",), options={"waveform": "constant", "sys_frac": 0.35, "onset": 0.0}
    ),
}


@dataclass(frozen=True)
class Component:
    id: str
    kind: str
    node_from: str
    node_to: str
    params: tuple = ()
    options: dict = field(default_factory=dict)
    group: Optional[str] = None
    line: int = 0

    @property
    def info(self) -> KindInfo:
        return KINDS[self.kind]

    def slot_tokens(self) -> dict[str, object]:
        """Map every parameter slot (and option) to its token in the netlist."""
        info = self.info
        out = dict(zip(info.slots + info.optional_slots, self.params))
        for key, default in info.options.items():
            out[key] = self.options.get(key, default)
        return out


@dataclass
class LocalState:
    """Quantities seen by a single component at one instant."""

    p_from: float
    p_to: float
    q: float
    q_dot: float = 0.0
    p_dot: float = 0.0
    state: Optional[float] = None
    state_dot: Optional[float] = None
    t: float = 0.0


def activation(t, period, onset, sys_frac, relax_frac):
    """Two-phase raised-cosine chamber activation in [0, 1]."""
    tau = np.mod(np.asarray(t, dtype=float) - onset, period)
    t1 = sys_frac * period
    t2 = relax_frac * period
    rise = 0.5 * (1.0 - np.cos(np.pi * tau / t1))
    fall = 0.5 * (1.0 + np.cos(np.pi * np.clip(tau - t1, 0.0, None) / t2))
    return np.where(tau < t1, rise, np.where(tau < t1 + t2, fall, 0.0))


def elastance(t, period, e_active, e_baseline, onset, sys_frac, relax_frac):
    return e_baseline + e_active * activation(t, period, onset, sys_frac, relax_frac)


def source_flow(t, period, q_mean, waveform, sys_frac, onset):
    """Prescribed flow of a FlowSource, with period mean ``q_mean``."""
    q_mean = np.asarray(q_mean, dtype=float)
    if waveform == "constant":
        return q_mean * np.ones_like(np.asarray(t, dtype=float))
    if waveform == "halfsine":
        tau = np.mod(np.asarray(t, dtype=float) - onset, period)
        ts = sys_frac * period
        peak = q_mean * np.pi / (2.0 * sys_frac)
        return np.where(tau < ts, peak * np.sin(np.pi * tau / ts), 0.0)
    raise ValueError(f"unknown flow waveform {waveform!r}")


def pdr_conductance(p_mean, r0, sensitivity, p_ref):
    return (1.0 + sensitivity * np.maximum(p_mean - p_ref, 0.0)) / r0


def valve_rate(s, dp, k_open, k_close):
    """Opening-state rate for the dynamic valve (Mynard-type law)."""
    return np.where(dp >= 0.0, (1.0 - s) * k_open * dp, s * k_close * dp)


def component_relation(component: Component, local: LocalState, values: dict, period=None):
    """Residual of the constitutive law: left side minus right side.

    ``values`` maps the component's slot names (``R``, ``K``, ``L`` ...) to
    numbers.  Zero iff the law is satisfied at ``local``.
    """
    kind = component.kind
    dp = local.p_from - local.p_to
    q = local.q
    if kind == "Resistor":
        return dp - values["R"] * q
    if kind == "NonlinearResistor":
        return dp - values["K"] * q * abs(q)
    if kind == "PressureDependentResistor":
        p_mean = 0.5 * (local.p_from + local.p_to)
        g = pdr_conductance(p_mean, values["R0"], values["sensitivity"], values.get("p_ref", 0.0))
        return dp - q / g
    if kind == "Inertance":
        return dp - values["L"] * local.q_dot
    if kind == "Compliance":
        return q - values["C"] * local.p_dot
    if kind == "ElastanceChamber":
        # q1 - q2 = dV/dt; the pressure-volume law is carried by the DAE.
        return q - local.state_dot
    if kind == "IdealValve":
        # complementarity q >= 0, dp <= 0, q * dp = 0, written as min(q, -dp)
        r_open = values.get("R_open", 0.0) or 0.0
        return min(q, -(dp - r_open * q))
    if kind == "DynamicValve":
        s = max(local.state if local.state is not None else 1.0, values.get("s_min", 1e-3))
        return dp - values["K"] / s**2 * q * abs(q) - values["L"] * local.q_dot
    if kind == "FlowSource":
        target = source_flow(
            local.t, period if period is not None else 1.0, values["Q_mean"],
            values.get("waveform", "constant"), values.get("sys_frac", 0.35), values.get("onset", 0.0),
        )
        return q - float(target)
    raise ValueError(f"unknown component kind {kind!r}")
