"""Time integration of assembled networks and periodic steady state search."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..circuit.dae import DaeSystem
from .stepper import NodalStepper

METHODS = ("backward-euler-newton", "rk4-with-projection")


class SolverError(RuntimeError):
    """Newton failure or non-finite state; carries time and residual."""

    def __init__(self, message, time=None, residual=None, samples=None):
        super().__init__(message)
        self.time = time
        self.residual = residual
        self.samples = samples


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 1e-3
    method: str = "backward-euler-newton"
    newton_tol: float = 1e-8
    newton_max_iter: int = 25
    max_cycles: int = 50
    cycle_tol: float = 1e-4
    max_bisections: int = 5

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not (self.newton_tol > 0 and self.cycle_tol >= 0):
            raise ValueError("tolerances must be positive")
        if self.max_cycles < 2:
            raise ValueError("max_cycles must be at least 2")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    algebraic: np.ndarray
    state_labels: tuple
    alg_labels: tuple


@dataclass
class CycleSolution:
    times: np.ndarray
    states: np.ndarray
    algebraic: np.ndarray
    converged: bool
    cycles_used: int
    state_labels: tuple
    alg_labels: tuple
    period: float
    residual: float = 0.0
    component_info: dict = field(default_factory=dict)

    def signal(self, ref: str) -> np.ndarray:
        """Signal by label: ``p:<node>``, ``q:<comp>``, ``dp:<comp>`` or a state label."""
        if ref in self.alg_labels:
            return self.algebraic[:, self.alg_labels.index(ref)]
        if ref in self.state_labels:
            return self.states[:, self.state_labels.index(ref)]
        if ref.startswith("dp:") and ref[3:] in self.component_info:
            a, b = self.component_info[ref[3:]]
            return self.pressure(a) - self.pressure(b)
        if ref.startswith("p:") and ref[2:] == self.component_info.get("__reference__"):
            return np.zeros_like(self.times)
        raise KeyError(f"unknown signal {ref!r}")

    def pressure(self, node: str) -> np.ndarray:
        return self.signal(f"p:{node}")


# --------------------------------------------------------------------- helpers
def _component_info(system: DaeSystem) -> dict:
    info = {comp.id: (comp.node_from, comp.node_to) for comp in system.netlist.components}
    info["__reference__"] = system.netlist.reference
    return info


def _initial_z(system: DaeSystem, y0, tol):
    z_guess = np.zeros((system.batch_size, system.n_alg))
    z_guess[:, : system.n_nodes] = 10.0
    return system.consistent_z(np.zeros(system.batch_size), y0, z_guess, tol=min(tol, 1e-10))


class _BEDriver:
    """Advances the batch by one nominal step, bisecting locally on failure."""

    def __init__(self, system: DaeSystem, config: SolverConfig):
        self.system = system
        self.config = config
        self.stepper = NodalStepper(system)

    def advance(self, sel, y, z, regime, t0, h, depth=0):
        """Step samples ``sel`` (indices) from ``t0`` by ``h``.

        Returns (y, z, regime, ok) for the selected rows.
        """
        st = self.stepper
        cfg = self.config
        reg = st.predict_regime(regime, z)
        u0 = st.u_from_z(z)
        t1 = t0 + h
        full = sel.size == self.system.batch_size and (sel.size == 0 or sel[-1] == sel.size - 1)
        y1, u1, q1, reg1, ok = st.step(None if full else sel, y, u0, t1, h, reg, cfg.newton_tol,
                                       cfg.newton_max_iter)
        finite = np.all(np.isfinite(y1), axis=1)
        ok &= finite
        z1 = np.where(ok[:, None], st.z_from(u1, q1), z)
        y1 = np.where(ok[:, None], y1, y)
        reg1 = np.where(ok[:, None], reg1, regime)
        if np.all(ok) or depth >= cfg.max_bisections:
            return y1, z1, reg1, ok
        bad = np.flatnonzero(~ok)
        s_bad = sel[bad]
        hb = 0.5 * h[bad]
        ya, za, ra, oka = self.advance(s_bad, y[bad], z[bad], regime[bad], t0[bad], hb, depth + 1)
        yb, zb, rb, okb = self.advance(s_bad, ya, za, ra, t0[bad] + hb, hb, depth + 1)
        good = oka & okb
        y1[bad] = np.where(good[:, None], yb, y[bad])
        z1[bad] = np.where(good[:, None], zb, z[bad])
        reg1[bad] = np.where(good[:, None], rb, regime[bad])
        ok[bad] = good
        return y1, z1, reg1, ok


def _rk4_step(system: DaeSystem, t, y, z, h, tol):
    def stage(ts, ys, zg):
        zs = system.consistent_z(ts, ys, zg, tol=tol)
        return system.rhs(ts, ys, zs), zs

    k1, z1 = stage(t, y, z)
    k2, z2 = stage(t + 0.5 * h, y + 0.5 * h[:, None] * k1, z1)
    k3, z3 = stage(t + 0.5 * h, y + 0.5 * h[:, None] * k2, z2)
    k4, z4 = stage(t + h, y + h[:, None] * k3, z3)
    y_new = y + (h[:, None] / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    # projection: algebraic unknowns re-solved on the new state
    z_new = system.consistent_z(t + h, y_new, z4, tol=tol)
    return y_new, z_new


# ------------------------------------------------------------------ integrate
def integrate(system: DaeSystem, config: SolverConfig = SolverConfig(), t_span=(0.0, 1.0),
              y0: Optional[np.ndarray] = None) -> Trajectory:
    """Integrate from ``t_span[0]`` to ``t_span[1]`` on a uniform grid.

    The step is ``config.dt`` shortened so that it divides the interval.
    Arrays carry a leading batch axis when the system holds several samples.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ValueError("t_span must be increasing")
    n_steps = max(1, math.ceil((t1 - t0) / config.dt - 1e-9))
    B = system.batch_size
    h = np.full(B, (t1 - t0) / n_steps)
    y = (system.initial_state if y0 is None else np.atleast_2d(np.asarray(y0, dtype=float))).copy()
    z = system.consistent_z(np.full(B, t0), y, _initial_z(system, y, config.newton_tol), tol=1e-10) \
        if t0 != 0.0 else _initial_z(system, y, config.newton_tol)
    Y = np.empty((B, n_steps + 1, system.n_diff))
    Z = np.empty((B, n_steps + 1, system.n_alg))
    Y[:, 0], Z[:, 0] = y, z
    allsel = np.arange(B)
    if config.method == "backward-euler-newton":
        drv = _BEDriver(system, config)
        regime = drv.stepper.valve_regime_from_z(z)
    for k in range(n_steps):
        t = t0 + k * h
        if config.method == "rk4-with-projection":
            y, z = _rk4_step(system, t, y, z, h, min(config.newton_tol, 1e-10))
        else:
            y, z, regime, ok = drv.advance(allsel, y, z, regime, t, h)
            if not np.all(ok):
                bad = np.flatnonzero(~ok)
                raise SolverError(f"Newton failed near t={t[bad[0]] + h[bad[0]]:.6g} s for samples {bad.tolist()[:5]}",
                                  time=float(t[bad[0]] + h[bad[0]]), samples=bad)
        if not np.all(np.isfinite(y)):
            raise SolverError(f"non-finite state at t={t[0] + h[0]:.6g} s", time=float(t[0] + h[0]))
        Y[:, k + 1], Z[:, k + 1] = y, z
    times = t0 + np.arange(n_steps + 1) * h[0]
    if B == 1:
        return Trajectory(times, Y[0], Z[0], system.state_labels, system.alg_labels)
    return Trajectory(times, Y, Z, system.state_labels, system.alg_labels)


# --------------------------------------------------------------- periodicity
def _rel_change(prev, cur, n):
    """Relative L2 change per sample over the first ``n[b] + 1`` rows."""
    out = np.empty(cur.shape[0])
    for b in range(cur.shape[0]):
        a = cur[b, : n[b] + 1]
        d = a - prev[b, : n[b] + 1]
        den = np.sqrt(np.sum(a * a))
        num = np.sqrt(np.sum(d * d))
        out[b] = 0.0 if num == 0.0 else (num / den if den > 0 else np.inf)
    return out


def run_to_periodic(system: DaeSystem, config: SolverConfig = SolverConfig(), period: Optional[float] = None,
                    return_failures: bool = False):
    """Integrate cycle by cycle until consecutive cycles agree.

    Each batch member uses its own heart period and step ``T/ceil(T/dt)``.
    Returns a :class:`CycleSolution` for a single-sample system, a list for
    a batch.  With ``return_failures`` solver failures in a batch are
    reported as ``None`` entries instead of raising.
    """
    B = system.batch_size
    if system.period is not None:
        T = system.period.astype(float)
    elif period is not None:
        T = np.full(B, float(period))
    else:
        raise ValueError("system has no heart period; pass period=")
    N = np.ceil(T / config.dt - 1e-9).astype(int)
    N = np.maximum(N, 1)
    H = T / N
    n_max = int(N.max())
    info = _component_info(system)

    y = system.initial_state.copy()
    z = _initial_z(system, y, config.newton_tol)
    be = config.method == "backward-euler-newton"
    if be:
        drv = _BEDriver(system, config)
        regime = drv.stepper.valve_regime_from_z(z)
    prev_y = np.zeros((B, n_max + 1, system.n_diff))
    cur_y = np.zeros((B, n_max + 1, system.n_diff))
    cur_z = np.zeros((B, n_max + 1, system.n_alg))
    active = np.ones(B, dtype=bool)
    failed = np.zeros(B, dtype=bool)
    results: list = [None] * B
    last_change = np.full(B, np.inf)
    for cycle in range(config.max_cycles):
        cur_y[:, 0] = y
        cur_z[:, 0] = z
        for k in range(n_max):
            sel = np.flatnonzero(active & (k < N))
            if sel.size == 0:
                break
            t = cycle * T[sel] + k * H[sel]
            if be:
                y_s, z_s, r_s, ok = drv.advance(sel, y[sel], z[sel], regime[sel], t, H[sel])
                regime[sel] = r_s
            else:
                sub = system if sel.size == B else system.subset(sel)
                y_s, z_s = _rk4_step(sub, t, y[sel], z[sel], H[sel], min(config.newton_tol, 1e-10))
                ok = np.all(np.isfinite(y_s), axis=1)
            ok &= np.all(np.isfinite(y_s), axis=1)
            y[sel] = y_s
            z[sel] = z_s
            cur_y[sel, k + 1] = y_s
            cur_z[sel, k + 1] = z_s
            if not np.all(ok):
                bad = sel[~ok]
                if not return_failures:
                    raise SolverError(
                        f"Newton failed near t={float(t[~ok][0] + H[bad[0]]):.6g} s (sample {int(bad[0])})",
                        time=float(t[~ok][0] + H[bad[0]]), samples=bad)
                failed[bad] = True
                active[bad] = False
        if cycle >= 1:
            idx = np.flatnonzero(active)
            change = _rel_change(prev_y[idx], cur_y[idx], N[idx])
            last_change[idx] = change
            done = idx[change < config.cycle_tol]
            for b in done:
                results[b] = _make_cycle(system, b, cur_y, cur_z, N, T, cycle, True, info, change[idx == b][0])
            active[done] = False
        if not np.any(active):
            break
        prev_y, cur_y = cur_y, prev_y
    else:
        cycle = config.max_cycles - 1
        for b in np.flatnonzero(active):
            # the most recent cycle sits in prev_y after the final swap
            results[b] = _make_cycle(system, b, prev_y, cur_z, N, T, cycle, False, info, last_change[b])
    if B == 1:
        if results[0] is None:
            raise SolverError("solver failed")
        return results[0]
    return results


def _make_cycle(system, b, Ybuf, Zbuf, N, T, cycle, converged, info, change):
    n = int(N[b])
    times = cycle * T[b] + np.arange(n + 1) * (T[b] / n)
    return CycleSolution(
        times=times,
        states=Ybuf[b, : n + 1].copy(),
        algebraic=Zbuf[b, : n + 1].copy(),
        converged=bool(converged),
        cycles_used=cycle + 1,
        state_labels=system.state_labels,
        alg_labels=system.alg_labels,
        period=float(T[b]),
        residual=float(change),
        component_info=info,
    )
