"""Backward-Euler step in companion (modified nodal) form.

Every storage element is replaced by its backward-Euler companion model, so a
step only needs node pressures plus the flows of components whose law is not
explicit in the pressure drop (valves and quadratic resistors).  The Newton
system therefore stays small and is solved for the whole batch at once.
"""
from __future__ import annotations

import numpy as np

from ..circuit.components import activation, source_flow
from ..circuit.dae import DaeSystem

EXPLICIT = ("Resistor", "PressureDependentResistor", "Inertance", "Compliance", "ElastanceChamber", "FlowSource")
IMPLICIT = ("NonlinearResistor", "IdealValve", "DynamicValve")


class _Group:
    """Components of one kind, vectorised over the group."""

    def __init__(self, system: DaeSystem, kind: str):
        comps = [c for c in system.components if c.kind == kind]
        nn = system.n_nodes
        self.kind = kind
        self.size = len(comps)
        self.cols = np.array([c.index for c in comps], dtype=int)
        self.f = np.array([c.i_from if c.i_from >= 0 else nn for c in comps], dtype=int)
        self.t = np.array([c.i_to if c.i_to >= 0 else nn for c in comps], dtype=int)
        self.states = np.array([c.state if c.state is not None else -1 for c in comps], dtype=int)
        self.implicit = np.array([c.implicit for c in comps], dtype=int)
        self.values = {}
        self.waveforms = [c.values.get("waveform") for c in comps]
        if comps:
            for slot, v in comps[0].values.items():
                if slot != "waveform":
                    self.values[slot] = np.stack([c.values[slot] for c in comps], axis=1)


class NodalStepper:
    def __init__(self, system: DaeSystem):
        self.system = system
        self.nn = system.n_nodes
        self.ni = system.n_implicit
        self.n = self.nn + self.ni
        self.groups = {k: _Group(system, k) for k in EXPLICIT + IMPLICIT}
        self.groups = {k: g for k, g in self.groups.items() if g.size}
        inc = system.incidence
        self.incidence = inc
        self.F = system.from_select
        self.T = system.to_select
        imp_cols = np.zeros(self.ni, dtype=int)
        for g in self.groups.values():
            if g.kind in IMPLICIT:
                imp_cols[g.implicit] = g.cols
        self.imp_cols = imp_cols
        self.inc_imp = inc[:, imp_cols]
        self.d_imp = self.F[imp_cols] - self.T[imp_cols]
        self.period = system.period_or_one()
        iv = self.groups.get("IdealValve")
        self.n_valves = iv.size if iv is not None else 0

    # ---------------------------------------------------------------- helpers
    @staticmethod
    def _take(arr, sel):
        return arr if sel is None else arr[sel]

    def valve_regime_from_z(self, z):
        """Initial open/closed regime of ideal valves from a consistent z."""
        g = self.groups.get("IdealValve")
        if g is None:
            return np.zeros((z.shape[0], 0), dtype=bool)
        pe = np.concatenate([z[:, : self.nn], np.zeros((z.shape[0], 1))], axis=1)
        dp = pe[:, g.f] - pe[:, g.t]
        q = z[:, self.nn + g.cols]
        return (q > 0) | (dp > 0)

    def predict_regime(self, regime, z):
        """Predictor: open valves stay open while forward flow persists; closed
        valves open when the pressure drop turns positive."""
        g = self.groups.get("IdealValve")
        if g is None:
            return regime
        pe = np.concatenate([z[:, : self.nn], np.zeros((z.shape[0], 1))], axis=1)
        dp = pe[:, g.f] - pe[:, g.t]
        q = z[:, self.nn + g.cols]
        return np.where(regime, q >= 0, dp > 0)

    # ---------------------------------------------------------------- residual
    def evaluate(self, sel, y_n, u, t, h, regime, jacobian=True):
        """Residual (and Jacobian) of the step equations.

        ``sel`` indexes the batch (None for all); ``y_n`` previous states,
        ``u`` current iterate ``[p, q_implicit]``, ``t`` end-of-step times and
        ``h`` step sizes (both per sample).
        """
        b = u.shape[0]
        nn, ni = self.nn, self.ni
        pe = np.concatenate([u[:, :nn], np.zeros((b, 1))], axis=1)
        q_all = np.zeros((b, self.system.n_comp))
        da = np.zeros((b, self.system.n_comp))
        db = np.zeros((b, self.system.n_comp))
        r_imp = np.empty((b, ni))
        c_dp = np.zeros((b, ni))
        c_q = np.zeros((b, ni))
        hh = h[:, None]
        for kind, g in self.groups.items():
            v = g.values if sel is None else {k: a[sel] for k, a in g.values.items()}
            pf = pe[:, g.f]
            pt = pe[:, g.t]
            dp = pf - pt
            if kind == "Resistor":
                q = dp / v["R"]
                a = 1.0 / v["R"]
                q_all[:, g.cols] = q
                da[:, g.cols] = a
                db[:, g.cols] = -a
            elif kind == "PressureDependentResistor":
                pm = 0.5 * (pf + pt)
                over = pm - v["p_ref"]
                gval = (1.0 + v["sensitivity"] * np.maximum(over, 0.0)) / v["R0"]
                slope = np.where(over > 0, v["sensitivity"] / v["R0"], 0.0)
                q_all[:, g.cols] = gval * dp
                da[:, g.cols] = gval + 0.5 * slope * dp
                db[:, g.cols] = -gval + 0.5 * slope * dp
            elif kind == "Inertance":
                a = hh / v["L"]
                q_all[:, g.cols] = y_n[:, g.states] + a * dp
                da[:, g.cols] = a
                db[:, g.cols] = -a
            elif kind == "Compliance":
                a = v["C"] / hh
                q_all[:, g.cols] = a * (dp - y_n[:, g.states])
                da[:, g.cols] = a
                db[:, g.cols] = -a
            elif kind == "ElastanceChamber":
                e = self._elastance(g, v, t, sel)
                a = 1.0 / (e * hh)
                q_all[:, g.cols] = (dp / e + v["V0"] - y_n[:, g.states]) / hh
                da[:, g.cols] = a
                db[:, g.cols] = -a
            elif kind == "FlowSource":
                q_all[:, g.cols] = self._source(g, v, t, sel)
            else:
                qi = u[:, nn + g.implicit]
                q_all[:, g.cols] = qi
                k = g.implicit
                if kind == "NonlinearResistor":
                    r_imp[:, k] = dp - v["K"] * qi * np.abs(qi)
                    c_dp[:, k] = 1.0
                    c_q[:, k] = -2.0 * v["K"] * np.abs(qi)
                elif kind == "IdealValve":
                    reg = regime
                    r_open = v["R_open"]
                    r_imp[:, k] = np.where(reg, dp - r_open * qi, qi)
                    c_dp[:, k] = np.where(reg, 1.0, 0.0)
                    c_q[:, k] = np.where(reg, -r_open, 1.0)
                elif kind == "DynamicValve":
                    s, ds = self._valve_opening(y_n[:, g.states + 1], dp, hh, v)
                    se = np.maximum(s, v["s_min"])
                    dse = np.where(s > v["s_min"], ds, 0.0)
                    fac = hh / v["L"]
                    quad = v["K"] * qi * np.abs(qi)
                    r_imp[:, k] = qi - y_n[:, g.states] - fac * (dp - quad / se**2)
                    c_dp[:, k] = -fac * (1.0 + 2.0 * quad / se**3 * dse)
                    c_q[:, k] = 1.0 + fac * 2.0 * v["K"] * np.abs(qi) / se**2
        res = np.empty((b, self.n))
        res[:, :nn] = self.system.node_balance(q_all)
        res[:, nn:] = r_imp
        if not jacobian:
            return res, q_all, None
        jac = self.system.node_balance_jacobian(da, db, self.n)
        jac[:, :nn, nn:] = self.inc_imp
        jac[:, nn:, :nn] = c_dp[:, :, None] * self.d_imp
        ar = np.arange(ni)
        jac[:, nn + ar, nn + ar] = c_q
        return res, q_all, jac

    def _elastance(self, g, v, t, sel):
        period = self._take(self.period, sel)[:, None]
        act = activation(t[:, None], period, v["onset"], v["sys_frac"], v["relax_frac"])
        return v["E_baseline"] + v["E_active"] * act

    def _source(self, g, v, t, sel):
        period = self._take(self.period, sel)
        out = np.empty((t.shape[0], g.size))
        for j, wave in enumerate(g.waveforms):
            out[:, j] = source_flow(t, period, v["Q_mean"][:, j], wave, v["sys_frac"][:, j], v["onset"][:, j])
        return out

    @staticmethod
    def _valve_opening(s_n, dp, hh, v):
        ko = hh * v["k_open"]
        kc = hh * v["k_close"]
        pos = dp >= 0
        den_o = 1.0 + ko * dp
        den_c = 1.0 - kc * dp
        s = np.where(pos, (s_n + ko * dp) / den_o, s_n / den_c)
        ds = np.where(pos, ko * (1.0 - s_n) / den_o**2, s_n * kc / den_c**2)
        return s, ds

    # ------------------------------------------------------------ state update
    def new_states(self, sel, y_n, u, t, h):
        y = y_n.copy()
        b = u.shape[0]
        pe = np.concatenate([u[:, : self.nn], np.zeros((b, 1))], axis=1)
        hh = h[:, None]
        for kind, g in self.groups.items():
            if kind not in ("Inertance", "Compliance", "ElastanceChamber", "DynamicValve"):
                continue
            v = {k: self._take(a, sel) for k, a in g.values.items()}
            dp = pe[:, g.f] - pe[:, g.t]
            if kind == "Inertance":
                y[:, g.states] = y_n[:, g.states] + hh / v["L"] * dp
            elif kind == "Compliance":
                y[:, g.states] = dp
            elif kind == "ElastanceChamber":
                y[:, g.states] = dp / self._elastance(g, v, t, sel) + v["V0"]
            else:
                s, _ = self._valve_opening(y_n[:, g.states + 1], dp, hh, v)
                y[:, g.states] = u[:, self.nn + g.implicit]
                y[:, g.states + 1] = s
        return y

    def valve_inconsistent(self, u, regime, tol):
        g = self.groups.get("IdealValve")
        if g is None:
            return np.zeros((u.shape[0], 0), dtype=bool)
        pe = np.concatenate([u[:, : self.nn], np.zeros((u.shape[0], 1))], axis=1)
        dp = pe[:, g.f] - pe[:, g.t]
        q = u[:, self.nn + g.implicit]
        return np.where(regime, q < -tol, dp > tol)

    def u_from_z(self, z):
        return np.concatenate([z[:, : self.nn], z[:, self.nn + self.imp_cols]], axis=1)

    def z_from(self, u, q_all):
        return np.concatenate([u[:, : self.nn], q_all], axis=1)

    # -------------------------------------------------------------------- step
    def newton(self, sel, y_n, u0, t, h, regime, tol, max_iter):
        """Batched Newton; returns (u, q_all, converged mask, residual norm)."""
        u = u0.copy()
        b = u.shape[0]
        conv = np.zeros(b, dtype=bool)
        norm = np.full(b, np.inf)
        q_out = np.zeros((b, self.system.n_comp))
        active = np.arange(b)
        for _ in range(max_iter + 1):
            if active.size == b:
                s_act, y_a, u_a, t_a, h_a, r_a = sel, y_n, u, t, h, regime
            else:
                s_act = active if sel is None else sel[active]
                y_a, u_a, t_a, h_a, r_a = y_n[active], u[active], t[active], h[active], regime[active]
            res, q_all, jac = self.evaluate(s_act, y_a, u_a, t_a, h_a, r_a)
            nrm = np.max(np.abs(res), axis=1)
            norm[active] = nrm
            ok = nrm < tol
            done = active[ok]
            conv[done] = True
            q_out[done] = q_all[ok]
            keep = ~ok & np.isfinite(nrm)
            if not np.any(keep):
                break
            active = active[keep]
            try:
                step = np.linalg.solve(jac[keep], res[keep][..., None])[..., 0]
            except np.linalg.LinAlgError:
                step = np.zeros_like(res[keep])
                for j, (jm, rv) in enumerate(zip(jac[keep], res[keep])):
                    try:
                        step[j] = np.linalg.solve(jm, rv)
                    except np.linalg.LinAlgError:
                        step[j] = np.nan
            u[active] -= step
            finite = np.all(np.isfinite(u[active]), axis=1)
            if not np.all(finite):
                norm[active[~finite]] = np.inf
                active = active[finite]
                if active.size == 0:
                    break
        return u, q_out, conv, norm

    def step(self, sel, y_n, u0, t, h, regime, tol, max_iter):
        """One backward-Euler step with valve-regime correction.

        Returns (y_new, u, q_all, regime, ok mask).
        """
        b = y_n.shape[0]
        regime = regime.copy()
        ok = np.zeros(b, dtype=bool)
        u_out = u0.copy()
        q_out = np.zeros((b, self.system.n_comp))
        todo = np.arange(b)
        u_guess = u0.copy()
        for _ in range(self.n_valves + 3):
            s_todo = todo if sel is None else sel[todo]
            u, q_all, conv, _ = self.newton(s_todo, y_n[todo], u_guess[todo], t[todo], h[todo], regime[todo],
                                            tol, max_iter)
            flip = self.valve_inconsistent(u, regime[todo], tol)
            need = np.any(flip, axis=1)
            good = conv & ~need
            ok[todo[good]] = True
            u_out[todo[good]] = u[good]
            q_out[todo[good]] = q_all[good]
            # flip valves whose regime contradicts the iterate and retry;
            # a Newton failure with a consistent regime is left to bisection
            retry = ~good & need
            if not np.any(retry):
                break
            rows = todo[retry]
            regime[rows] = np.where(flip[retry], ~regime[rows], regime[rows])
            u_guess[rows] = np.where(np.isfinite(u[retry]), u[retry], u_guess[rows])
            todo = rows
        y_new = np.empty_like(y_n)
        if np.any(ok):
            idx = np.flatnonzero(ok)
            s_ok = idx if sel is None else sel[idx]
            y_new[idx] = self.new_states(s_ok, y_n[idx], u_out[idx], t[idx], h[idx])
        return y_new, u_out, q_out, regime, ok
