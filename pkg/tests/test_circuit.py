import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cardiometa.circuit import (Component, DanglingNodeError, DuplicateIdError, LocalState, MissingReferenceNodeError,
                                NetlistSyntaxError, UnboundParameterError, UnknownComponentError, assemble_dae,
                                component_relation, parse_netlist, reference_netlist)
from cardiometa.circuit.dae import OutOfRangeError

from conftest import RC_NETLIST, WINDKESSEL

MINIMAL = """
[nodes]
gnd ref
n1
[params]
R 1 1 1 resistance
Q 1 1 1 flow
[components]
Resistor R1 n1 gnd R
FlowSource S1 gnd n1 Q
"""


def test_parse_minimal():
    net = parse_netlist(MINIMAL)
    assert len(net.components) == 2
    assert net.free_nodes == ("n1",)


def test_dangling_node():
    with pytest.raises(DanglingNodeError):
        parse_netlist(MINIMAL.replace("Resistor R1 n1 gnd R", "Resistor R1 n9 gnd R"))


def test_duplicate_id():
    with pytest.raises(DuplicateIdError):
        parse_netlist(MINIMAL.replace("FlowSource S1", "FlowSource R1"))


def test_unknown_kind():
    with pytest.raises(UnknownComponentError):
        parse_netlist(MINIMAL.replace("Resistor R1", "Capacitor R1"))


def test_missing_reference():
    with pytest.raises(MissingReferenceNodeError):
        parse_netlist(MINIMAL.replace("gnd ref", "gnd"))


def test_syntax_error_reports_line():
    with pytest.raises(NetlistSyntaxError) as exc:
        parse_netlist(MINIMAL.replace("R 1 1 1 resistance", "R one 1 1 resistance"))
    assert exc.value.line > 0


def _comp(kind, *params):
    return Component("X", kind, "a", "b", params)


def test_resistor_relation():
    assert component_relation(_comp("Resistor", "R"), LocalState(2.0, 0.0, 2.0), {"R": 1.0}) == 0.0


def test_nonlinear_resistor_relation():
    res = component_relation(_comp("NonlinearResistor", "K"), LocalState(-18.0, 0.0, -3.0), {"K": 2.0})
    assert res == 0.0


def test_ideal_valve_relation():
    valve = _comp("IdealValve")
    assert component_relation(valve, LocalState(0.0, 5.0, 0.0), {}) == 0.0
    assert component_relation(valve, LocalState(0.0, 5.0, 1.0), {}) != 0.0


@given(st.floats(-100, 100), st.floats(-50, 50), st.floats(0.01, 10))
def test_resistive_relations_are_odd(dp, q, k):
    for kind, key in (("Resistor", "R"), ("NonlinearResistor", "K")):
        comp = _comp(kind, key)
        fwd = component_relation(comp, LocalState(dp, 0.0, q), {key: k})
        back = component_relation(comp, LocalState(-dp, 0.0, -q), {key: k})
        assert back == pytest.approx(-fwd, abs=1e-9)


def test_windkessel_state_counts():
    sys_ = assemble_dae(parse_netlist(RC_NETLIST), {})
    assert sys_.n_diff == 1 and sys_.n_alg >= 1
    src = RC_NETLIST.replace("Resistor R1 n1 gnd R", "Resistor R1 n1 n2 R\nInertance L1 n2 gnd L")
    src = src.replace("n1\n[params]", "n1\nn2\n[params]").replace("C 1 1 1 compliance",
                                                                 "C 1 1 1 compliance\nL 1 1 1 inertance")
    assert assemble_dae(parse_netlist(src), {}).n_diff == 2


def test_valve_only_network_is_closed():
    src = """
[nodes]
gnd ref
a
b
[params]
R 1 1 1 resistance
[components]
IdealValve V1 a b
Resistor R1 b gnd R
Resistor R2 a gnd R
"""
    sys_ = assemble_dae(parse_netlist(src), {})
    y0 = sys_.initial_state[0]
    z = sys_.consistent_z(0.0, y0)
    assert np.allclose(z, 0.0, atol=1e-12)


def test_unbound_and_out_of_range():
    net = parse_netlist(WINDKESSEL)
    with pytest.raises(UnboundParameterError):
        assemble_dae(net, {"R": 1.0})
    with pytest.raises(OutOfRangeError):
        assemble_dae(net, {"R": 5.0, "C": 1.5, "Q": 80.0})
    assemble_dae(net, {"R": 5.0, "C": 1.5, "Q": 80.0}, allow_out_of_range=True)


def test_assembly_deterministic():
    net = reference_netlist("model2_pah")
    a = assemble_dae(net, use_nominal=True)
    b = assemble_dae(net, use_nominal=True)
    assert a.state_labels == b.state_labels and a.alg_labels == b.alg_labels
    assert len(set(a.state_labels)) == len(a.state_labels)


@pytest.mark.parametrize("stem,n_inputs", [("model1_liver", 9), ("model2_pah", 10), ("model3_transport", 9)])
def test_reference_netlists(stem, n_inputs):
    net = reference_netlist(stem)
    assert len(net.sampled_parameters()) == n_inputs
    for p in net.parameters.values():
        assert p.low <= p.nominal <= p.high


def test_model2_outputs():
    net = reference_netlist("model2_pah")
    assert len(net.outputs) == 10
    pre = net.without_group("shunt")
    names = [p.name for p in pre.sampled_parameters()]
    assert "D_shunt" not in names and "k_shunt" not in names
