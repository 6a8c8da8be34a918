import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cardiometa.circuit import assemble_dae, parse_netlist, reference_netlist
from cardiometa.solver import SolverConfig, run_to_periodic
from cardiometa.transport import (ConcentrationSignal, TransportError, TransportSpec, signal_features,
                                  simulate_tracer)

BASE = """
[nodes]
gnd ref
a
[params]
R 1 1 1 resistance
Q 1 1 1 flow
V 2.0 1 4 volume
alpha 0.1 0 1 rate
dose 3.0 0 10 dimensionless
q 0.5 0.1 1 flow
tau 0.37 0.1 1 time
[components]
Resistor R1 a gnd R
FlowSource S1 gnd a Q
[transport]
"""

DECAY = BASE + """compartment X volume = V
inject X start = 0 duration = 0 dose = dose
eliminate X rate = alpha
observe X
signal duration = 20 dt = 0.1 step = 0.01
"""

LOOP = BASE + """compartment A volume = V
compartment B volume = 3
edge A B flow = q
edge B A flow = q delay = tau
inject A start = 0.5 duration = 1.3 dose = dose
observe B
signal duration = 30 dt = 0.1 step = 0.01
"""


def _spec(src, **values):
    return TransportSpec.from_netlist(parse_netlist(src), values)


def test_exponential_decay_oracle():
    sig = simulate_tracer(None, _spec(DECAY))
    k = int(round(10.0 / 0.1))
    exact = 3.0 / 2.0 * np.exp(-1.0)
    assert abs(sig.values[k] - exact) / exact < 1e-5


def test_decay_auc_oracle():
    sig = simulate_tracer(None, _spec(DECAY))
    exact = 3.0 / (2.0 * 0.1) * (1.0 - np.exp(-0.1 * 20.0))
    assert signal_features(sig)["auc"] == pytest.approx(exact, abs=1e-2)
    # the trapezoid error is second order in the signal grid; compare with its own estimate
    t = sig.times
    trap = np.trapezoid(1.5 * np.exp(-0.1 * t), t)
    assert signal_features(sig)["auc"] == pytest.approx(trap, abs=1e-4)


def test_mass_conserved_without_elimination():
    sig = simulate_tracer(None, _spec(LOOP))
    after = sig.times >= 1.8 + 1e-9
    assert np.max(np.abs(sig.mass[after] - 3.0)) / 3.0 < 1e-6


def test_zero_dose_gives_zero_signal():
    sig = simulate_tracer(None, _spec(LOOP, dose=0.0))
    assert np.all(sig.values == 0.0)
    with pytest.raises(ValueError):
        signal_features(sig)


@given(st.floats(0.1, 5.0), st.floats(0.1, 1.0))
def test_linear_in_dose_and_nonnegative(dose, tau):
    one = simulate_tracer(None, _spec(LOOP, dose=dose, tau=tau))
    two = simulate_tracer(None, _spec(LOOP, dose=2 * dose, tau=tau))
    assert np.allclose(two.values, 2 * one.values, rtol=1e-9, atol=1e-12)
    assert np.all(one.values >= 0.0)


def test_signal_length_and_grid():
    sig = simulate_tracer(None, _spec(LOOP))
    assert sig.values.shape == (301,)
    assert np.allclose(np.diff(sig.times), 0.1)


def test_batched_equals_single():
    spec = _spec(LOOP, tau=np.array([0.2, 0.37, 0.9]), dose=np.array([1.0, 2.0, 3.0]))
    both = simulate_tracer(None, spec)
    for j in range(3):
        one = simulate_tracer(None, spec.member(j))
        assert np.allclose(both.values[j], one.values, rtol=1e-12, atol=1e-15)


def test_inconsistent_flows_rejected():
    bad = LOOP.replace("edge B A flow = q delay = tau", "edge B A flow = 2 * q delay = tau")
    with pytest.raises(TransportError, match="inconsistent"):
        simulate_tracer(None, _spec(bad))


def test_signal_step_must_divide_grid():
    bad = LOOP.replace("dt = 0.1 step = 0.01", "dt = 0.1 step = 0.03")
    with pytest.raises(TransportError):
        _spec(bad).validate()


def test_triangle_features():
    sig = ConcentrationSignal(np.array([0.0, 1.0, 2.0]), np.array([0.0, 2.0, 0.0]))
    f = signal_features(sig)
    assert f == {"time_to_peak": 1.0, "peak": 2.0, "auc": 2.0}


@pytest.fixture(scope="module")
def model3_cycle():
    net = reference_netlist("model3_transport")
    return net, run_to_periodic(assemble_dae(net, use_nominal=True), SolverConfig())


def test_anomaly_reduces_organ_auc(model3_cycle):
    net, cyc = model3_cycle
    s0 = np.array([0.0, 0.2, 0.4, 0.6, 0.8])
    spec = TransportSpec.from_netlist(net, {"s0": s0})
    sig = simulate_tracer([cyc] * s0.size, spec)
    auc = np.trapezoid(sig.values, sig.times, axis=1)
    assert np.all(np.diff(auc) < 0)
    assert np.all(sig.values >= 0)


def test_model3_flows_balance(model3_cycle):
    net, cyc = model3_cycle
    flows = TransportSpec.from_netlist(net).edge_flows(cyc)
    assert np.all(flows >= 0)
