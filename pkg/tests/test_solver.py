import numpy as np
import pytest

from cardiometa.circuit import assemble_dae, parse_netlist, reference_netlist
from cardiometa.solver import (BiomarkerError, CycleSolution, SolverConfig, evaluate_biomarker, extract_biomarkers,
                               integrate, run_to_periodic, write_trajectory_csv)

from conftest import RC_NETLIST, WINDKESSEL

TWO_TANKS = """
[nodes]
gnd ref
a
b
[params]
C1 1.0 1 1 compliance
C2 2.0 2 2 compliance
R 0.5 0.5 0.5 resistance
[components]
Compliance CA a gnd C1
Compliance CB b gnd C2
Resistor R1 a b R
[init]
P:CA = 10
P:CB = 0
"""


def _rc_error(dt, method="rk4-with-projection"):
    sys_ = assemble_dae(parse_netlist(RC_NETLIST), {})
    tr = integrate(sys_, SolverConfig(dt=dt, method=method), (0.0, 1.0))
    return abs(tr.states[-1, 0] - np.exp(-1.0))


def test_rk4_analytic_decay():
    assert _rc_error(1e-3) < 1e-6


def test_rk4_order():
    ratio = _rc_error(0.1) / _rc_error(0.05)
    assert 14.0 <= ratio <= 18.0


def test_backward_euler_first_order():
    ratio = _rc_error(0.02, "backward-euler-newton") / _rc_error(0.01, "backward-euler-newton")
    assert 1.8 < ratio < 2.2


def test_closed_loop_conserves_volume():
    sys_ = assemble_dae(parse_netlist(TWO_TANKS), {})
    tr = integrate(sys_, SolverConfig(dt=1e-2), (0.0, 10.0))
    vol = sys_.stored_volume(tr.states)
    assert np.max(np.abs(vol - vol[0])) < 1e-8
    # the loop equilibrates at the volume-weighted pressure
    assert tr.states[-1, 0] == pytest.approx(10.0 / 3.0, rel=1e-4)


def test_time_invariant_converges_in_two_cycles():
    src = TWO_TANKS.replace("[init]\nP:CA = 10\nP:CB = 0\n", "[heart]\nperiod = 1\n[init]\nP:CA = 5\nP:CB = 5\n")
    sys_ = assemble_dae(parse_netlist(src), {})
    cyc = run_to_periodic(sys_, SolverConfig(dt=1e-2))
    assert cyc.converged and cyc.cycles_used == 2
    assert np.allclose(cyc.states, 5.0)


def test_unreachable_tolerance():
    sys_ = assemble_dae(parse_netlist(WINDKESSEL), use_nominal=True)
    cyc = run_to_periodic(sys_, SolverConfig(cycle_tol=0.0, max_cycles=3))
    assert not cyc.converged and cyc.cycles_used == 3


def test_windkessel_pressure_ordering():
    net = parse_netlist(WINDKESSEL)
    cyc = run_to_periodic(assemble_dae(net, use_nominal=True), SolverConfig())
    bm = extract_biomarkers(cyc, net.outputs)
    assert cyc.converged
    assert bm["P_sys"] >= bm["MAP"] >= bm["P_dia"]
    # mean pressure of a Windkessel equals R times the mean inflow
    assert bm["MAP"] == pytest.approx(1.0 * 80.0, rel=2e-3)


def test_model2_nominal_cycle():
    net = reference_netlist("model2_pah")
    sys_ = assemble_dae(net, use_nominal=True)
    cyc = run_to_periodic(sys_, SolverConfig(max_cycles=50, cycle_tol=1e-4))
    assert cyc.converged and cyc.cycles_used <= 50
    vol = sys_.stored_volume(cyc.states)
    assert np.max(np.abs(vol - vol[0])) / vol[0] < 1e-6
    bm = extract_biomarkers(cyc, net.outputs)
    for site in ("ao", "pa"):
        assert bm[f"P_{site}_sys"] >= bm[f"P_{site}_mean"] >= bm[f"P_{site}_dias"]
    # valves rectify: period-mean forward flow is non-negative
    for v in ("q:AV", "q:PVV"):
        assert np.trapezoid(cyc.signal(v), cyc.times) >= -1e-8
    again = run_to_periodic(assemble_dae(net, use_nominal=True), SolverConfig())
    assert np.array_equal(again.states, cyc.states)


def _cycle(times, **signals):
    labels = tuple(signals)
    alg = np.stack([signals[k] for k in labels], axis=1)
    return CycleSolution(times, np.zeros((times.size, 0)), alg, True, 2, (), labels, times[-1] - times[0])


def test_constant_signal_biomarkers():
    t = np.linspace(0.0, 1.0, 101)
    cyc = _cycle(t, **{"p:A": np.full(t.size, 10.0)})
    for f in ("mean", "max", "min"):
        assert evaluate_biomarker(cyc, f"{f}(p:A)") == pytest.approx(10.0)


def test_stroke_volume_half_sine():
    t = np.linspace(0.0, 1.0, 20001)
    q = np.maximum(np.sin(2 * np.pi * t), 0.0) * np.pi
    cyc = _cycle(t, **{"q:V": q})
    assert evaluate_biomarker(cyc, "stroke(q:V)") == pytest.approx(1.0, abs=1e-6)


def test_ratio_in_series_loop_and_zero_denominator():
    t = np.linspace(0.0, 1.0, 11)
    q = 1.0 + np.sin(2 * np.pi * t)
    cyc = _cycle(t, **{"q:A": q, "q:B": q.copy(), "q:Z": np.zeros(t.size)})
    assert evaluate_biomarker(cyc, "ratio(q:A, q:B)") == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(BiomarkerError):
        evaluate_biomarker(cyc, "ratio(q:A, q:Z)")
    with pytest.raises(BiomarkerError):
        evaluate_biomarker(cyc, "mean(q:missing)")


def test_trajectory_csv(tmp_path):
    net = parse_netlist(WINDKESSEL)
    cyc = run_to_periodic(assemble_dae(net, use_nominal=True), SolverConfig())
    path = tmp_path / "traj.csv"
    write_trajectory_csv(path, cyc)
    head = path.read_text().splitlines()[0].split(",")
    assert head[0] == "t" and "P:C1" in head
