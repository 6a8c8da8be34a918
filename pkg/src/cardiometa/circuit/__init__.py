"""Netlist documents, component laws and DAE assembly."""
from .components import KINDS, Component, LocalState, component_relation
from .dae import (AssemblyError, DaeSystem, OutOfRangeError, StructuralSingularityError, UnboundParameterError,
                  assemble_dae)
from .netlist import (DanglingNodeError, DisconnectedNetworkError, DuplicateIdError, MissingReferenceNodeError,
                      Netlist, NetlistError, NetlistSyntaxError, ParameterSpec, UnknownComponentError,
                      UnresolvedParameterError, load_netlist, parse_netlist, reference_netlist)

__all__ = [
    "KINDS", "Component", "LocalState", "component_relation", "AssemblyError", "DaeSystem", "OutOfRangeError",
    "StructuralSingularityError", "UnboundParameterError", "assemble_dae", "DanglingNodeError",
    "DisconnectedNetworkError", "DuplicateIdError", "MissingReferenceNodeError", "Netlist", "NetlistError",
    "NetlistSyntaxError", "ParameterSpec", "UnknownComponentError", "UnresolvedParameterError", "load_netlist",
    "parse_netlist", "reference_netlist",
]
