"""Tracer transport through well-mixed compartments on a solved circulation.

Each compartment ``i`` obeys

    V_i dc_i/dt = sum_in Q c_up - sum_out Q c_i - alpha V_i c_i + s_i(t)

with period-mean flows taken from the hemodynamic cycle.  One edge may carry
a transport lag (the recirculation delay); it is realised as a ring buffer of
mass packets, each packet being released ``tau`` later and split linearly
between two steps when ``tau`` is not a multiple of the internal step.  The
scheme conserves tracer mass exactly in exact arithmetic.

The ``[transport]`` netlist section uses one directive per line::

    compartment VN  volume = 0.18 * BV
    edge VN CEN flow = q:Rorg + q:Rliv  delay = tau
    inject VN start = 0 duration = 2 dose = 1
    eliminate LIV rate = alpha
    anomaly s0 = s0 scale = AR>AN,AN>ORG bypass = AR>REST
    observe ORG
    signal duration = 60 dt = 0.1 step = 0.01

Flow expressions containing a ``:`` are signals of the hemodynamic solution
(period means); anything else is an arithmetic expression of parameters.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .circuit import expressions

DIRECTIVES = ("compartment", "edge", "inject", "eliminate", "anomaly", "observe", "signal")
_KEY = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)\s*=")
FLOW_RTOL = 1e-6


class TransportError(ValueError):
    pass


# --------------------------------------------------------------------- parsing
def _split_directive(line: str) -> tuple[str, list[str], dict[str, str]]:
    """``word pos pos key = value key = value`` -> (word, positionals, options)."""
    m = _KEY.search(line)
    head = line[:m.start()] if m else line
    words = head.split()
    if not words or words[0] not in DIRECTIVES:
        raise TransportError(f"unknown transport directive in {line!r}")
    opts: dict[str, str] = {}
    keys = list(_KEY.finditer(line))
    for k, km in enumerate(keys):
        end = keys[k + 1].start() if k + 1 < len(keys) else len(line)
        opts[km.group(1)] = line[km.end():end].strip()
    return words[0], words[1:], opts


def _is_signal(text: str) -> bool:
    return ":" in text


def transport_symbols(lines: Sequence[str]) -> set[str]:
    """Parameter names referenced by transport directives."""
    out: set[str] = set()
    for line in lines:
        _, _, opts = _split_directive(line)
        for key, text in opts.items():
            if key in ("scale", "bypass") or (key == "flow" and _is_signal(text)):
                continue
            out |= expressions.symbols(text)
    return out


def _edge_pairs(text: str) -> list[tuple[str, str]]:
    pairs = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        a, sep, b = item.partition(">")
        if not sep:
            raise TransportError(f"edge reference {item!r} must look like FROM>TO")
        pairs.append((a.strip(), b.strip()))
    return pairs


# ----------------------------------------------------------------------- types
@dataclass
class Injection:
    compartment: str
    start: np.ndarray
    duration: np.ndarray
    dose: np.ndarray


@dataclass
class TransportSpec:
    """Compartment network for one or more samples (array fields of length B)."""

    compartments: tuple
    volumes: np.ndarray                  # (B, n)
    edges: tuple                         # ((from, to), ...)
    flow_exprs: tuple                    # one per edge
    injection: Injection
    elimination: dict = field(default_factory=dict)   # compartment -> rate (B,)
    delay_edge: Optional[int] = None
    delay: Optional[np.ndarray] = None   # (B,)
    s0: Optional[np.ndarray] = None      # (B,)
    anomaly_scale: tuple = ()
    anomaly_bypass: tuple = ()
    observe: str = ""
    duration: float = 60.0
    dt_signal: float = 0.1
    step: float = 0.01
    static_flows: Optional[np.ndarray] = None   # (B, E) for parameter-only flows

    @property
    def size(self) -> int:
        return self.volumes.shape[0]

    @property
    def n_samples(self) -> int:
        return int(round(self.duration / self.dt_signal)) + 1

    def member(self, j) -> "TransportSpec":
        """Sub-batch (an index array keeps the batch axis, an int gives B=1)."""
        idx = np.atleast_1d(np.asarray(j))
        pick = (lambda a: None if a is None else a[idx])
        inj = Injection(self.injection.compartment, self.injection.start[idx], self.injection.duration[idx],
                        self.injection.dose[idx])
        return replace(self, volumes=self.volumes[idx], injection=inj,
                       elimination={k: v[idx] for k, v in self.elimination.items()},
                       delay=pick(self.delay), s0=pick(self.s0), static_flows=pick(self.static_flows))

    @classmethod
    def from_netlist(cls, netlist, values: Optional[Mapping[str, object]] = None) -> "TransportSpec":
        from .circuit.netlist import as_batch
        if not netlist.transport:
            raise TransportError(f"netlist {netlist.name!r} has no [transport] section")
        batch, size = as_batch(values or {})
        size = max(size, 1)
        scope = netlist.resolve(batch)

        def num(text):
            v = np.asarray(expressions.evaluate(text, scope), dtype=float)
            return np.broadcast_to(v, (size,)).astype(float)

        comps, vols, edges, flows, delay_edge, delay = [], [], [], [], None, None
        inj = None
        elimination, s0, scale, bypass, observe = {}, None, (), (), ""
        sig = {"duration": 60.0, "dt": 0.1, "step": 0.01}
        for lineno, line in netlist.transport:
            try:
                word, pos, opts = _split_directive(line)
                if word == "compartment":
                    comps.append(pos[0])
                    vols.append(num(opts["volume"]))
                elif word == "edge":
                    edges.append((pos[0], pos[1]))
                    flows.append(opts["flow"])
                    if "delay" in opts:
                        if delay_edge is not None:
                            raise TransportError("only one delayed edge is supported")
                        delay_edge, delay = len(edges) - 1, num(opts["delay"])
                elif word == "inject":
                    inj = Injection(pos[0], num(opts.get("start", "0")), num(opts.get("duration", "0")),
                                    num(opts.get("dose", "1")))
                elif word == "eliminate":
                    elimination[pos[0]] = num(opts["rate"])
                elif word == "anomaly":
                    s0 = num(opts["s0"])
                    scale = tuple(_edge_pairs(opts.get("scale", "")))
                    bypass = tuple(_edge_pairs(opts.get("bypass", "")))
                elif word == "observe":
                    observe = pos[0]
                elif word == "signal":
                    for key in sig:
                        if key in opts:
                            sig[key] = float(expressions.evaluate(opts[key], {}))
            except (KeyError, IndexError) as exc:
                raise TransportError(f"line {lineno}: incomplete transport directive {line!r} ({exc})") from None
            except expressions.ExpressionError as exc:
                raise TransportError(f"line {lineno}: {exc}") from None
        if inj is None:
            inj = Injection(comps[0] if comps else "", np.zeros(size), np.zeros(size), np.zeros(size))
        static = None
        if not any(_is_signal(f) for f in flows):
            static = np.stack([num(f) for f in flows], axis=1) if flows else np.zeros((size, 0))
        spec = cls(tuple(comps), np.stack(vols, axis=1), tuple(edges), tuple(flows), inj, elimination, delay_edge,
                   delay, s0, scale, bypass, observe or (comps[-1] if comps else ""), sig["duration"], sig["dt"],
                   sig["step"], static)
        spec.validate()
        return spec

    def validate(self) -> None:
        names = set(self.compartments)
        if len(names) != len(self.compartments):
            raise TransportError("duplicate compartment names")
        for a, b in list(self.edges) + list(self.anomaly_scale) + list(self.anomaly_bypass):
            if a not in names or b not in names:
                raise TransportError(f"edge {a}>{b} references an unknown compartment")
        for a, b in list(self.anomaly_scale) + list(self.anomaly_bypass):
            if (a, b) not in self.edges:
                raise TransportError(f"anomaly edge {a}>{b} is not a declared edge")
        for n in [self.observe, self.injection.compartment] + list(self.elimination):
            if n not in names:
                raise TransportError(f"unknown compartment {n!r}")
        if np.any(~(self.volumes > 0)):
            raise TransportError("compartment volumes must be positive")
        if np.any(self.injection.dose < 0):
            raise TransportError("dose must be non-negative")
        if self.s0 is not None and np.any((self.s0 < 0) | (self.s0 > 1)):
            raise TransportError("anomaly intensity s0 must lie in [0, 1]")
        if self.step <= 0 or self.dt_signal <= 0 or self.duration <= 0:
            raise TransportError("signal grid values must be positive")
        stride = self.dt_signal / self.step
        if abs(stride - round(stride)) > 1e-9 * stride or round(stride) < 1:
            raise TransportError(f"signal step {self.dt_signal} is not a multiple of the internal step {self.step}")
        span = self.duration / self.dt_signal
        if abs(span - round(span)) > 1e-9 * span:
            raise TransportError("signal duration is not a multiple of the signal step")
        if self.delay is not None and np.any(self.delay < self.step):
            raise TransportError("recirculation delay must be at least one internal step")

    # ------------------------------------------------------------------ flows
    def edge_flows(self, hemo=None) -> np.ndarray:
        """Period-mean edge flows (B, E) with the anomaly applied and checked."""
        E = len(self.edges)
        if hemo is None:
            if self.static_flows is None:
                raise TransportError("flows refer to hemodynamic signals; pass a solved cycle")
            raw = self.static_flows.copy()
        elif isinstance(hemo, np.ndarray):
            raw = np.atleast_2d(np.asarray(hemo, dtype=float)).copy()
        elif isinstance(hemo, Mapping):
            raw = np.atleast_2d(np.stack([np.broadcast_to(np.asarray(hemo[e], float), (self.size,))
                                          for e in self.edges], axis=1)).copy()
        else:
            cycles = hemo if isinstance(hemo, (list, tuple)) else [hemo]
            raw = np.array([[_cycle_flow(c, f) for f in self.flow_exprs] for c in cycles], dtype=float)
        if raw.shape != (self.size, E):
            raise TransportError(f"expected flows of shape {(self.size, E)}, got {raw.shape}")
        if self.s0 is not None and self.anomaly_scale:
            first = self.edges.index(self.anomaly_scale[0])
            removed = self.s0 * raw[:, first]
            for e in self.anomaly_scale:
                k = self.edges.index(e)
                raw[:, k] = raw[:, k] * (1.0 - self.s0)
            for e in self.anomaly_bypass:
                k = self.edges.index(e)
                raw[:, k] = raw[:, k] + removed
        scale = np.max(np.abs(raw), axis=1, keepdims=True) if E else np.ones((self.size, 1))
        if np.any(raw < -FLOW_RTOL * scale):
            raise TransportError("negative period-mean flow on a transport edge")
        raw = np.maximum(raw, 0.0)
        self._check_balance(raw)
        return raw

    def _check_balance(self, flows: np.ndarray) -> None:
        for i, name in enumerate(self.compartments):
            inflow = np.zeros(self.size)
            outflow = np.zeros(self.size)
            for k, (a, b) in enumerate(self.edges):
                if b == name:
                    inflow = inflow + flows[:, k]
                if a == name:
                    outflow = outflow + flows[:, k]
            ref = np.maximum(np.maximum(inflow, outflow), 1e-300)
            bad = np.abs(inflow - outflow) > FLOW_RTOL * ref
            if np.any(bad):
                j = int(np.flatnonzero(bad)[0])
                raise TransportError(
                    f"inconsistent flow network at compartment {name}: in {inflow[j]:.9g}, out {outflow[j]:.9g}")


def _cycle_flow(cycle, expr: str) -> float:
    if not _is_signal(expr):
        return float(expressions.evaluate(expr, {}))
    from .solver.biomarkers import _signal, period_mean
    return period_mean(cycle.times, _signal(cycle, expr))


@dataclass
class ConcentrationSignal:
    times: np.ndarray
    values: np.ndarray        # (T,) or (B, T)
    mass: Optional[np.ndarray] = None   # tracer in the system, same shape as values

    def to_csv(self, path) -> None:
        vals = np.atleast_2d(self.values)
        if vals.shape[0] != 1:
            raise ValueError("CSV export holds a single signal")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("t,c\n")
            for t, c in zip(self.times, vals[0]):
                fh.write(f"{t:.17g},{c:.17g}\n")


# ----------------------------------------------------------------- simulation
def simulate_tracer(hemo, spec: TransportSpec, flows: Optional[np.ndarray] = None) -> ConcentrationSignal:
    """Integrate the compartment model with RK4 on the internal step.

    ``hemo`` is a solved cycle (or a list, one per sample), a mapping
    ``(from, to) -> flow`` or ``None`` when the flows are parameter
    expressions.  Returns the observed concentration on the signal grid.
    """
    Q = spec.edge_flows(hemo) if flows is None else np.atleast_2d(flows)
    B, n = spec.volumes.shape
    h = spec.step
    stride = int(round(spec.dt_signal / h))
    n_out = spec.n_samples
    n_steps = (n_out - 1) * stride
    index = {name: i for i, name in enumerate(spec.compartments)}
    V = spec.volumes
    plain = [(index[a], index[b], Q[:, k]) for k, (a, b) in enumerate(spec.edges) if k != spec.delay_edge]
    alpha = np.zeros((B, n))
    for name, rate in spec.elimination.items():
        alpha[:, index[name]] = rate

    delayed = None
    if spec.delay_edge is not None:
        a, b = spec.edges[spec.delay_edge]
        d_steps = spec.delay / h
        lag = np.floor(d_steps).astype(int)
        frac = d_steps - lag
        ring = np.zeros((B, int(lag.max()) + 2))
        delayed = (index[a], index[b], Q[:, spec.delay_edge], lag, frac, ring)

    inj_i = index[spec.injection.compartment]
    start, dur, dose = spec.injection.start, spec.injection.duration, spec.injection.dose
    bolus = dur <= 0
    rate = np.where(bolus, 0.0, dose / np.where(bolus, 1.0, dur))

    def deriv(c, source):
        flux = source.copy()
        for i, j, q in plain:
            m = q * c[:, i]
            flux[:, i] = flux[:, i] - m
            flux[:, j] = flux[:, j] + m
        if delayed is not None:
            i = delayed[0]
            flux[:, i] = flux[:, i] - delayed[2] * c[:, i]
        return flux / V - alpha * c

    c = np.zeros((B, n))
    rows = np.arange(B)
    values = np.zeros((B, n_out))
    mass = np.zeros((B, n_out))
    bolus_step = np.where(bolus, np.rint(start / h).astype(int), -1)
    for k in range(n_steps + 1):
        t = k * h
        hit = bolus_step == k
        if np.any(hit):
            c[hit, inj_i] = c[hit, inj_i] + dose[hit] / V[hit, inj_i]
        if k % stride == 0:
            o = k // stride
            values[:, o] = c[:, index[spec.observe]]
            total = np.zeros(B)
            for i in range(n):
                total = total + V[:, i] * c[:, i]
            if delayed is not None:
                ring = delayed[5]
                for s in range(ring.shape[1]):
                    total = total + ring[:, s]
            mass[:, o] = total
        if k == n_steps:
            break
        source = np.zeros((B, n))
        overlap = np.clip(np.minimum(t + h, start + dur) - np.maximum(t, start), 0.0, None)
        source[:, inj_i] = rate * overlap / h
        if delayed is not None:
            _, j, q, lag, frac, ring = delayed
            slot = k % ring.shape[1]
            source[:, j] = source[:, j] + ring[:, slot] / h
            ring[:, slot] = 0.0
        k1 = deriv(c, source)
        c2 = c + 0.5 * h * k1
        k2 = deriv(c2, source)
        c3 = c + 0.5 * h * k2
        k3 = deriv(c3, source)
        c4 = c + h * k3
        k4 = deriv(c4, source)
        if delayed is not None:
            i, _, q, lag, frac, ring = delayed
            cup = (c[:, i] + 2.0 * c2[:, i] + 2.0 * c3[:, i] + c4[:, i]) / 6.0
            packet = h * q * cup
            L = ring.shape[1]
            ring[rows, (k + lag) % L] += (1.0 - frac) * packet
            ring[rows, (k + lag + 1) % L] += frac * packet
        c = c + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
    times = np.arange(n_out) * spec.dt_signal
    if B == 1:
        return ConcentrationSignal(times, values[0], mass[0])
    return ConcentrationSignal(times, values, mass)


def signal_features(signal: ConcentrationSignal) -> dict:
    """Peak value, first time of the peak and trapezoidal area under the curve."""
    vals = np.asarray(signal.values, dtype=float)
    if vals.ndim != 1:
        raise ValueError("signal_features expects a single signal")
    if vals.size == 0:
        raise ValueError("empty signal")
    if not np.any(vals != 0.0):
        raise ValueError("time to peak is undefined for an all-zero signal")
    k = int(np.argmax(vals))
    return {"time_to_peak": float(signal.times[k]), "peak": float(vals[k]),
            "auc": float(np.trapezoid(vals, signal.times))}


__all__ = ["TransportError", "TransportSpec", "Injection", "ConcentrationSignal", "simulate_tracer",
           "signal_features", "transport_symbols"]
