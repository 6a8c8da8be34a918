"""Assembly of the semi-explicit DAE ``y' = b(t, y, z)``, ``G(t, y, z) = 0``.

Differential states ``y`` are the energy stores of the network: compliance
pressures (``P:<id>``), inertance flows (``Q:<id>``), chamber volumes
(``V:<id>``) and dynamic-valve flow/opening (``Q:<id>``, ``S:<id>``).

Algebraic unknowns ``z`` are the pressures of every non-reference node
(``p:<node>``) followed by the flow through every component (``q:<id>``).
``G`` stacks one flow balance per node and one constitutive law per
component, so the system is square.

All evaluators are batched: parameters are arrays of length ``B`` and
``y``/``z`` carry a leading batch axis.  One-dimensional inputs are treated
as a batch of one and the result is returned without the batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import structural_rank

from . import expressions
from .components import KINDS, activation, source_flow
from .netlist import Netlist, as_batch


class AssemblyError(ValueError):
    pass


class UnboundParameterError(AssemblyError):
    pass


class OutOfRangeError(AssemblyError):
    pass


class StructuralSingularityError(AssemblyError):
    pass


class InitializationError(RuntimeError):
    pass


FB_SMOOTHING = 1e-30


@dataclass
class CompiledComponent:
    index: int
    id: str
    kind: str
    i_from: int  # node index, -1 for the reference node
    i_to: int
    values: dict  # slot -> (B,) array, plus non-numeric options
    state: Optional[int] = None  # first differential-state index
    implicit: int = -1  # position among implicit-flow components


def _bind_values(netlist: Netlist, parameter_values: Mapping[str, object], allow_out_of_range: bool,
                 use_nominal: bool = False):
    used = netlist.used_symbols()
    values = dict(parameter_values)
    for name in values:
        if name not in netlist.parameters:
            raise UnboundParameterError(f"unknown parameter {name!r} for netlist {netlist.name!r}")
    for spec in netlist.parameters.values():
        if spec.name not in values:
            if spec.sampled and spec.name in used and not use_nominal:
                raise UnboundParameterError(f"parameter {spec.name!r} has no value")
            values[spec.name] = spec.nominal
    batch, size = as_batch(values)
    if not allow_out_of_range:
        for name, arr in batch.items():
            spec = netlist.parameters[name]
            tol = 1e-12 * max(1.0, abs(spec.low), abs(spec.high))
            bad = (arr < spec.low - tol) | (arr > spec.high + tol)
            if np.any(bad):
                raise OutOfRangeError(
                    f"parameter {name!r}={arr[bad][0]!r} outside [{spec.low}, {spec.high}]")
    return netlist.resolve(batch), size


def _slot_value(token, scope, size):
    if isinstance(token, str):
        val = expressions.evaluate(token, scope)
    else:
        val = token
    return np.broadcast_to(np.asarray(val, dtype=float), (size,)).copy()


def invalid_samples(netlist: Netlist, scope: Mapping[str, object], size: int) -> np.ndarray:
    """Mask of batch members with non-finite or non-positive constitutive values."""
    bad = np.zeros(size, dtype=bool)
    for comp in netlist.components:
        info = KINDS[comp.kind]
        for slot, tok in comp.slot_tokens().items():
            if slot == "waveform":
                continue
            val = _slot_value(tok, scope, size)
            bad |= ~np.isfinite(val)
            if slot in info.positive:
                bad |= ~(val > 0)
            if comp.kind == "ElastanceChamber" and slot == "E_active":
                bad |= val < 0
    if netlist.heart_period is not None:
        period = _slot_value(netlist.heart_period, scope, size)
        bad |= ~(period > 0) | ~np.isfinite(period)
    return bad


class DaeSystem:
    """Batched residual form of a netlist for fixed parameter values."""

    def __init__(self, netlist: Netlist, scope: Mapping[str, object], size: int):
        self.netlist = netlist
        self.scope = dict(scope)
        self.batch_size = size
        self.nodes = netlist.free_nodes
        node_index = {n: i for i, n in enumerate(self.nodes)}
        node_index[netlist.reference] = -1
        self.period = None
        if netlist.heart_period is not None:
            self.period = _slot_value(netlist.heart_period, scope, size)

        labels: list[str] = []
        comps: list[CompiledComponent] = []
        n_imp = 0
        for k, comp in enumerate(netlist.components):
            info = KINDS[comp.kind]
            vals = {}
            for slot, tok in comp.slot_tokens().items():
                vals[slot] = tok if slot == "waveform" else _slot_value(tok, scope, size)
            if comp.kind == "IdealValve" and "R_open" not in vals:
                vals["R_open"] = np.zeros(size)
            cc = CompiledComponent(k, comp.id, comp.kind, node_index[comp.node_from], node_index[comp.node_to], vals)
            if info.states:
                cc.state = len(labels)
                labels.extend(f"{s}:{comp.id}" for s in info.states)
            if info.implicit_flow:
                cc.implicit = n_imp
                n_imp += 1
            comps.append(cc)
        self.components = comps
        self.state_labels = tuple(labels)
        self.alg_labels = tuple([f"p:{n}" for n in self.nodes] + [f"q:{c.id}" for c in comps])
        self.n_nodes = len(self.nodes)
        self.n_comp = len(comps)
        self.n_diff = len(labels)
        self.n_alg = self.n_nodes + self.n_comp
        self.n_implicit = n_imp

        inc = np.zeros((self.n_nodes, self.n_comp))
        f_sel = np.zeros((self.n_comp, self.n_nodes))
        t_sel = np.zeros((self.n_comp, self.n_nodes))
        for c in comps:
            if c.i_from >= 0:
                inc[c.i_from, c.index] += 1.0
                f_sel[c.index, c.i_from] = 1.0
            if c.i_to >= 0:
                inc[c.i_to, c.index] -= 1.0
                t_sel[c.index, c.i_to] = 1.0
        self.incidence = inc
        self.from_select = f_sel
        self.to_select = t_sel
        # padded (node, slot) -> component / sign tables for order-fixed sums
        deg = max([int(np.count_nonzero(row)) for row in inc] + [1])
        self._kcl_cols = np.full((self.n_nodes, deg), self.n_comp, dtype=int)
        self._kcl_sign = np.zeros((self.n_nodes, deg))
        for i, row in enumerate(inc):
            cols = np.flatnonzero(row)
            self._kcl_cols[i, : len(cols)] = cols
            self._kcl_sign[i, : len(cols)] = row[cols]
        self._jac_passes = self._kcl_jacobian_passes()
        self._check_structure()
        self.initial_state = self._initial_state()

    # ------------------------------------------------------------------ helpers
    def node_balance(self, q):
        """Signed flow sum at every free node, summed in a fixed order.

        Matrix products would be shorter but their rounding depends on the
        batch size; explicit sums keep every batch member bit-identical to a
        solo run.
        """
        qp = np.concatenate([q, np.zeros(q.shape[:-1] + (1,))], axis=-1)
        out = self._kcl_sign[:, 0] * qp[:, self._kcl_cols[:, 0]]
        for j in range(1, self._kcl_cols.shape[1]):
            out = out + self._kcl_sign[:, j] * qp[:, self._kcl_cols[:, j]]
        return out

    def _kcl_jacobian_passes(self):
        """Split d(node balance)/d(pressure) contributions into passes whose
        target entries are distinct, so fancy-indexed accumulation is exact
        and order-fixed."""
        entries = []  # (row, col, component, which, sign)
        for c in self.components:
            for node, sign in ((c.i_from, 1.0), (c.i_to, -1.0)):
                if node < 0:
                    continue
                if c.i_from >= 0:
                    entries.append((node, c.i_from, c.index, 0, sign))
                if c.i_to >= 0:
                    entries.append((node, c.i_to, c.index, 1, sign))
        passes: list[list] = []
        for e in entries:
            for ps in passes:
                if all((e[0], e[1]) != (o[0], o[1]) for o in ps):
                    ps.append(e)
                    break
            else:
                passes.append([e])
        out = []
        for ps in passes:
            arr = np.array(ps, dtype=float)
            out.append((arr[:, 0].astype(int), arr[:, 1].astype(int), arr[:, 2].astype(int),
                        arr[:, 3].astype(int), arr[:, 4]))
        return out

    def node_balance_jacobian(self, da, db, size):
        """d(node balance)/d(p) given per-component dq/dp_from and dq/dp_to."""
        jac = np.zeros((da.shape[0], size, size))
        both = np.stack([da, db], axis=-1)
        for rows, cols, comp, which, sign in self._jac_passes:
            jac[:, rows, cols] += sign * both[:, comp, which]
        return jac

    def period_or_one(self):
        return self.period if self.period is not None else np.ones(self.batch_size)

    def elastance(self, c: CompiledComponent, t):
        v = c.values
        act = activation(t, self.period_or_one(), v["onset"], v["sys_frac"], v["relax_frac"])
        return v["E_baseline"] + v["E_active"] * act

    def source(self, c: CompiledComponent, t):
        v = c.values
        return source_flow(t, self.period_or_one(), v["Q_mean"], v["waveform"], v["sys_frac"], v["onset"])

    def node_pressures(self, p):
        """Append the reference pressure (zero) as the last column."""
        return np.concatenate([p, np.zeros(p.shape[:-1] + (1,))], axis=-1)

    def state_index(self, label: str) -> int:
        return self.state_labels.index(label)

    def subset(self, mask) -> "DaeSystem":
        """The same system restricted to selected batch members."""
        idx = np.flatnonzero(np.asarray(mask)) if np.asarray(mask).dtype == bool else np.asarray(mask)
        scope = {k: (np.asarray(v)[idx] if np.ndim(v) == 1 and np.shape(v)[0] == self.batch_size else v)
                 for k, v in self.scope.items()}
        sub = DaeSystem(self.netlist, scope, len(idx))
        sub.initial_state = self.initial_state[idx].copy()
        return sub

    # -------------------------------------------------------------- structure
    def _check_structure(self):
        rows, cols = [], []
        nn = self.n_nodes

        def add(r, node):
            if node >= 0:
                rows.append(r)
                cols.append(node)

        for c in self.components:
            if c.i_from >= 0:
                rows.append(c.i_from)
                cols.append(nn + c.index)
            if c.i_to >= 0:
                rows.append(c.i_to)
                cols.append(nn + c.index)
            r = nn + c.index
            if c.kind in ("Resistor", "NonlinearResistor", "PressureDependentResistor", "IdealValve"):
                add(r, c.i_from)
                add(r, c.i_to)
                rows.append(r)
                cols.append(nn + c.index)
            elif c.kind in ("Compliance", "ElastanceChamber"):
                add(r, c.i_from)
                add(r, c.i_to)
            else:  # Inertance, DynamicValve, FlowSource fix the flow
                rows.append(r)
                cols.append(nn + c.index)
        pattern = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n_alg, self.n_alg))
        rank = structural_rank(pattern)
        if rank < self.n_alg:
            raise StructuralSingularityError(
                f"algebraic system is structurally singular (rank {rank} < {self.n_alg}); "
                "check for nodes whose pressure no component determines or loops of storage elements")

    def _initial_state(self):
        y0 = np.zeros((self.batch_size, self.n_diff))
        for c in self.components:
            if c.state is None:
                continue
            if c.kind == "Compliance":
                y0[:, c.state] = 10.0
            elif c.kind == "ElastanceChamber":
                y0[:, c.state] = c.values["V0"] + 20.0
            elif c.kind == "DynamicValve":
                y0[:, c.state + 1] = 0.5
        for label, expr in self.netlist.init.items():
            if label not in self.state_labels:
                raise AssemblyError(f"[init] refers to unknown state {label!r}")
            y0[:, self.state_index(label)] = _slot_value(expr, self.scope, self.batch_size)
        return y0

    def stored_volume(self, y) -> np.ndarray:
        """Blood held in compliances (C p) and chambers (V), per sample or time row."""
        y = np.asarray(y, dtype=float)
        total = np.zeros(y.shape[:-1])
        for c in self.components:
            if c.kind == "Compliance":
                total = total + c.values["C"] * y[..., c.state]
            elif c.kind == "ElastanceChamber":
                total = total + y[..., c.state]
        return total

    # -------------------------------------------------------------- residuals
    def _split(self, y, z, t):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        single = y.ndim == 1
        y = np.atleast_2d(y)
        z = np.atleast_2d(z)
        t = np.broadcast_to(np.asarray(t, dtype=float), (y.shape[0],))
        return single, y, z, t

    def rhs(self, t, y, z):
        single, y, z, t = self._split(y, z, t)
        nn = self.n_nodes
        pe = self.node_pressures(z[:, :nn])
        q = z[:, nn:]
        out = np.zeros_like(y)
        for c in self.components:
            if c.state is None:
                continue
            s = c.state
            if c.kind == "Compliance":
                out[:, s] = q[:, c.index] / c.values["C"]
            elif c.kind == "ElastanceChamber":
                out[:, s] = q[:, c.index]
            elif c.kind == "Inertance":
                dp = pe[:, c.i_from] - pe[:, c.i_to]
                out[:, s] = dp / c.values["L"]
            elif c.kind == "DynamicValve":
                v = c.values
                dp = pe[:, c.i_from] - pe[:, c.i_to]
                qv = y[:, s]
                sv = np.maximum(y[:, s + 1], v["s_min"])
                out[:, s] = (dp - v["K"] / sv**2 * qv * np.abs(qv)) / v["L"]
                out[:, s + 1] = np.where(dp >= 0, (1.0 - y[:, s + 1]) * v["k_open"] * dp,
                                         y[:, s + 1] * v["k_close"] * dp)
        return out[0] if single else out

    def constraints(self, t, y, z, jacobian: bool = False):
        """Residual ``G``; with ``jacobian=True`` also ``dG/dz`` (B, n_alg, n_alg)."""
        single, y, z, t = self._split(y, z, t)
        B = y.shape[0]
        nn = self.n_nodes
        pe = self.node_pressures(z[:, :nn])
        q = z[:, nn:]
        res = np.empty((B, self.n_alg))
        res[:, :nn] = self.node_balance(q)
        jac = None
        if jacobian:
            jac = np.zeros((B, self.n_alg, self.n_alg))
            jac[:, :nn, nn:] = self.incidence
        for c in self.components:
            v = c.values
            r = nn + c.index
            jq = nn + c.index
            pf = pe[:, c.i_from]
            pt = pe[:, c.i_to]
            dp = pf - pt
            qc = q[:, c.index]
            d_dp = None  # derivative of the residual wrt dp (applied to both ends)
            d_pf = d_pt = None
            d_q = None
            if c.kind == "Resistor":
                res[:, r] = dp - v["R"] * qc
                d_dp, d_q = 1.0, -v["R"]
            elif c.kind == "NonlinearResistor":
                res[:, r] = dp - v["K"] * qc * np.abs(qc)
                d_dp, d_q = 1.0, -2.0 * v["K"] * np.abs(qc)
            elif c.kind == "PressureDependentResistor":
                pm = 0.5 * (pf + pt)
                slope = np.where(pm > v["p_ref"], v["sensitivity"] / v["R0"], 0.0)
                g = (1.0 + v["sensitivity"] * np.maximum(pm - v["p_ref"], 0.0)) / v["R0"]
                res[:, r] = qc - g * dp
                d_pf = -(g + 0.5 * slope * dp)
                d_pt = g - 0.5 * slope * dp
                d_q = 1.0
            elif c.kind == "Inertance":
                res[:, r] = qc - y[:, c.state]
                d_q = 1.0
            elif c.kind == "Compliance":
                res[:, r] = dp - y[:, c.state]
                d_dp = 1.0
            elif c.kind == "ElastanceChamber":
                e = self.elastance(c, t)
                res[:, r] = dp - e * (y[:, c.state] - v["V0"])
                d_dp = 1.0
            elif c.kind == "IdealValve":
                # smoothed Fischer-Burmeister form of q >= 0, -(dp - R q) >= 0, complementary
                a = qc
                b = -(dp - v["R_open"] * qc)
                root = np.sqrt(a * a + b * b + FB_SMOOTHING)
                res[:, r] = a + b - root
                da = 1.0 - a / root
                db = 1.0 - b / root
                d_dp = -db
                d_q = da + db * v["R_open"]
            elif c.kind == "DynamicValve":
                res[:, r] = qc - y[:, c.state]
                d_q = 1.0
            elif c.kind == "FlowSource":
                res[:, r] = qc - self.source(c, t)
                d_q = 1.0
            if jacobian:
                if d_dp is not None:
                    d_pf, d_pt = d_dp, -np.asarray(d_dp)
                if d_pf is not None and c.i_from >= 0:
                    jac[:, r, c.i_from] += d_pf
                if d_pt is not None and c.i_to >= 0:
                    jac[:, r, c.i_to] += d_pt
                if d_q is not None:
                    jac[:, r, jq] += d_q
        if single:
            return (res[0], jac[0]) if jacobian else res[0]
        return (res, jac) if jacobian else res

    def jac_z(self, t, y, z):
        return self.constraints(t, y, z, jacobian=True)[1]

    def consistent_z(self, t, y, z_guess=None, tol: float = 1e-10, max_iter: int = 50):
        """Newton solve of ``G(t, y, z) = 0`` for ``z`` with backtracking."""
        single = np.asarray(y).ndim == 1
        y = np.atleast_2d(np.asarray(y, dtype=float))
        B = y.shape[0]
        if z_guess is None:
            z = np.zeros((B, self.n_alg))
            z[:, : self.n_nodes] = 10.0
        else:
            z = np.atleast_2d(np.array(z_guess, dtype=float))
        res, jac = self.constraints(t, y, z, jacobian=True)
        norm = np.max(np.abs(res), axis=1)
        for _ in range(max_iter):
            active = norm >= tol
            if not np.any(active):
                break
            idx = np.flatnonzero(active)
            try:
                step = np.linalg.solve(jac[idx], -res[idx][..., None])[..., 0]
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(jac[idx[0]], -res[idx[0]], rcond=None)[0][None, :] if len(idx) == 1 \
                    else np.stack([np.linalg.lstsq(jac[i], -res[i], rcond=None)[0] for i in idx])
            lam = np.ones(len(idx))
            for _ in range(30):
                trial = z.copy()
                trial[idx] += lam[:, None] * step
                n_trial = np.max(np.abs(self.constraints(t, y, trial)), axis=1)[idx]
                ok = n_trial < (1.0 - 1e-4 * lam) * norm[idx]
                if np.all(ok):
                    break
                lam = np.where(ok, lam, 0.5 * lam)
            z[idx] = z[idx] + lam[:, None] * step
            res, jac = self.constraints(t, y, z, jacobian=True)
            norm = np.max(np.abs(res), axis=1)
        if np.any(~(norm < tol * 100)):
            bad = int(np.flatnonzero(~(norm < tol * 100))[0])
            raise InitializationError(
                f"no consistent algebraic state at t={np.broadcast_to(t, (B,))[bad]}: residual {norm[bad]:.3e}")
        return z[0] if single else z


def assemble_dae(netlist: Netlist, parameter_values: Optional[Mapping[str, object]] = None,
                 allow_out_of_range: bool = False, use_nominal: bool = False) -> DaeSystem:
    """Bind parameter values (scalars or equal-length arrays) and build the DAE.

    Parameters fixed in the netlist (``low == high``) and parameters no active
    component uses default to their nominal values; with ``use_nominal`` so
    do missing sampled parameters, otherwise they are an error.
    """
    scope, size = _bind_values(netlist, parameter_values or {}, allow_out_of_range, use_nominal)
    bad = invalid_samples(netlist, scope, size)
    if np.any(bad):
        raise AssemblyError(
            f"non-positive or non-finite constitutive value for batch member(s) {np.flatnonzero(bad).tolist()[:5]}")
    return DaeSystem(netlist, scope, size)
