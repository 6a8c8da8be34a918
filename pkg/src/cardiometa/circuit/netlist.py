"""Netlist documents: declarative description of a lumped circulation.

A netlist is a line-oriented text file with bracketed sections::

    [nodes]
    gnd ref
    AO
    [params]
    # name nominal low high role
    R_sys 1.0 0.8 1.2 resistance
    [components]
    Resistor R1 AO gnd R_sys
    [heart]
    period = 0.8

Optional sections are ``[derived]`` (``name = expression``), ``[init]``
(initial state overrides), ``[outputs]`` (biomarker definitions) and
``[transport]`` (tracer compartments, read by :mod:`cardiometa.transport`).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import expressions
from .components import KINDS, Component

ROLES = {
    "resistance": "mmHg*s/mL",
    "nonlinear-resistance": "mmHg*s^2/mL^2",
    "inertance": "mmHg*s^2/mL",
    "compliance": "mL/mmHg",
    "elastance": "mmHg/mL",
    "volume": "mL",
    "time": "s",
    "dimensionless": "-",
    "flow": "mL/s",
    "pressure": "mmHg",
    "rate": "1/s",
    "length": "cm",
    "frequency": "1/min",
    "mass": "kg",
    "specific-volume": "mL/kg",
    "stress": "kPa",
    "viscosity": "g/(cm*s)",
    "density": "g/cm^3",
}

SECTIONS = ("netlist", "nodes", "params", "derived", "components", "heart", "init", "outputs", "transport")


class NetlistError(ValueError):
    """Base class for netlist diagnostics, carrying a source location."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        where = f"line {line}, column {column}: " if line else ""
        super().__init__(where + message)


class NetlistSyntaxError(NetlistError):
    pass


class UnknownComponentError(NetlistError):
    pass


class DanglingNodeError(NetlistError):
    pass


class MissingReferenceNodeError(NetlistError):
    pass


class DuplicateIdError(NetlistError):
    pass


class UnresolvedParameterError(NetlistError):
    pass


class DisconnectedNetworkError(NetlistError):
    pass


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    nominal: float
    low: float
    high: float
    role: str

    @property
    def sampled(self) -> bool:
        return self.low < self.high

    @property
    def unit(self) -> str:
        return ROLES[self.role]


@dataclass(frozen=True)
class Netlist:
    name: str
    nodes: tuple[str, ...]
    reference: str
    components: tuple[Component, ...]
    parameters: dict[str, ParameterSpec]
    derived: dict[str, str] = field(default_factory=dict)
    heart_period: Optional[str] = None
    init: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    output_groups: dict[str, str] = field(default_factory=dict)
    transport: tuple[tuple[int, str], ...] = ()
    source: str = ""

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.source.encode("utf-8")).hexdigest()[:16]

    @property
    def free_nodes(self) -> tuple[str, ...]:
        return tuple(n for n in self.nodes if n != self.reference)

    @property
    def groups(self) -> set[str]:
        return {c.group for c in self.components if c.group}

    def component(self, cid: str) -> Component:
        for c in self.components:
            if c.id == cid:
                return c
        raise KeyError(cid)

    def without_group(self, group: str) -> "Netlist":
        """Copy with every component of ``group`` removed (and nodes left isolated)."""
        comps = tuple(c for c in self.components if c.group != group)
        used = {self.reference}
        for c in comps:
            used.update((c.node_from, c.node_to))
        nodes = tuple(n for n in self.nodes if n in used)
        outputs = {k: v for k, v in self.outputs.items()
                   if self.output_groups.get(k) != group and _output_refs_ok(v, nodes, comps)}
        groups = {k: g for k, g in self.output_groups.items() if k in outputs}
        out = replace(self, components=comps, nodes=nodes, outputs=outputs, output_groups=groups,
                      source=self.source + f"\n#without-group {group}\n")
        _check_connected(out)
        return out

    def used_symbols(self) -> set[str]:
        """Parameters (and derived names) reachable from active components and sections."""
        roots: set[str] = set()
        for c in self.components:
            for slot, tok in c.slot_tokens().items():
                if isinstance(tok, str) and slot != "waveform":
                    roots |= expressions.symbols(tok)
        for text in list(self.init.values()) + ([self.heart_period] if self.heart_period else []):
            roots |= expressions.symbols(text)
        if self.transport:
            from ..transport import transport_symbols
            roots |= transport_symbols([line for _, line in self.transport])
        seen: set[str] = set()
        stack = list(roots)
        while stack:
            name = stack.pop()
            if name in seen:
                continue
            seen.add(name)
            if name in self.derived:
                stack.extend(expressions.symbols(self.derived[name]))
        return seen

    def sampled_parameters(self) -> list[ParameterSpec]:
        used = self.used_symbols()
        return [p for p in self.parameters.values() if p.sampled and p.name in used]

    def nominal_values(self) -> dict[str, float]:
        return {name: p.nominal for name, p in self.parameters.items()}

    def resolve(self, values: Mapping[str, object]) -> dict[str, object]:
        """Evaluate parameters plus derived quantities in dependency order."""
        scope: dict[str, object] = {}
        for name, spec in self.parameters.items():
            scope[name] = values[name] if name in values else spec.nominal
        for name in _derived_order(self.derived):
            scope[name] = expressions.evaluate(self.derived[name], scope)
        return scope


def _output_refs_ok(text: str, nodes, comps) -> bool:
    ids = {c.id for c in comps}
    for tok in text.replace("(", " ").replace(")", " ").replace(",", " ").replace("+", " ").split():
        if ":" in tok:
            kind, ref = tok.split(":", 1)
            if kind == "p" and ref not in nodes:
                return False
            if kind in ("q", "dp") and ref not in ids:
                return False
    return True


def _derived_order(derived: Mapping[str, str]) -> list[str]:
    order: list[str] = []
    state: dict[str, int] = {}

    def visit(name: str):
        if state.get(name) == 2:
            return
        if state.get(name) == 1:
            raise NetlistError(f"cyclic derived parameter {name!r}")
        state[name] = 1
        for dep in expressions.symbols(derived[name]):
            if dep in derived:
                visit(dep)
        state[name] = 2
        order.append(name)

    for name in derived:
        visit(name)
    return order


def _split_comment(raw: str) -> str:
    return raw.split("#", 1)[0].rstrip()


def parse_netlist(source: str, name: Optional[str] = None) -> Netlist:
    """Parse and validate a netlist document."""
    section = None
    nodes: list[str] = []
    reference: list[tuple[str, int]] = []
    node_lines: dict[str, int] = {}
    params: dict[str, ParameterSpec] = {}
    derived: dict[str, str] = {}
    comps: list[Component] = []
    init: dict[str, str] = {}
    outputs: dict[str, str] = {}
    output_groups: dict[str, str] = {}
    transport: list[tuple[int, str]] = []
    heart = None
    title = name

    for lineno, raw in enumerate(source.splitlines(), start=1):
        text = _split_comment(raw)
        if not text.strip():
            continue
        col = len(text) - len(text.lstrip()) + 1
        stripped = text.strip()
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise NetlistSyntaxError("unterminated section header", lineno, col)
            section = stripped[1:-1].strip().lower()
            if section not in SECTIONS:
                raise NetlistSyntaxError(f"unknown section [{section}]", lineno, col)
            continue
        if section is None:
            raise NetlistSyntaxError("content before any section header", lineno, col)
        tokens = stripped.split()

        if section == "netlist":
            key, _, val = stripped.partition("=")
            if key.strip() != "name" or not val.strip():
                raise NetlistSyntaxError("expected 'name = <identifier>'", lineno, col)
            title = title or val.strip()
        elif section == "nodes":
            node = tokens[0]
            if node in node_lines:
                raise DuplicateIdError(f"duplicate node {node!r}", lineno, col)
            node_lines[node] = lineno
            nodes.append(node)
            if len(tokens) > 1:
                if tokens[1:] != ["ref"]:
                    raise NetlistSyntaxError("node line is '<name> [ref]'", lineno, col + len(node) + 1)
                reference.append((node, lineno))
        elif section == "params":
            if len(tokens) != 5:
                raise NetlistSyntaxError("parameter line is '<name> <nominal> <low> <high> <role>'", lineno, col)
            pname, nom, lo, hi, role = tokens
            if pname in params or pname in derived:
                raise DuplicateIdError(f"duplicate parameter {pname!r}", lineno, col)
            try:
                nom_f, lo_f, hi_f = float(nom), float(lo), float(hi)
            except ValueError:
                raise NetlistSyntaxError("parameter values must be numbers", lineno, col) from None
            if role not in ROLES:
                raise NetlistSyntaxError(f"unknown parameter role {role!r}", lineno, text.find(role) + 1)
            if not lo_f <= nom_f <= hi_f:
                raise NetlistSyntaxError(f"parameter {pname!r} needs low <= nominal <= high", lineno, col)
            params[pname] = ParameterSpec(pname, nom_f, lo_f, hi_f, role)
        elif section in ("derived", "init", "outputs"):
            key, eq, val = stripped.partition("=")
            if not eq or not key.strip() or not val.strip():
                raise NetlistSyntaxError("expected '<name> = <expression>'", lineno, col)
            key = key.strip()
            target = {"derived": derived, "init": init, "outputs": outputs}[section]
            if key in target or (section == "derived" and key in params):
                raise DuplicateIdError(f"duplicate {section} entry {key!r}", lineno, col)
            if section != "outputs":
                try:
                    expressions.parse_expression(val)
                except expressions.ExpressionError as exc:
                    raise NetlistSyntaxError(str(exc), lineno, text.find("=") + 2) from None
            val = val.strip()
            if section == "outputs" and " group=" in f" {val}":
                head, _, grp = val.rpartition("group=")
                if not grp.strip() or " " in grp.strip():
                    raise NetlistSyntaxError("expected 'group=<name>' at the end of the output", lineno, col)
                output_groups[key] = grp.strip()
                val = head.strip()
            target[key] = val
        elif section == "heart":
            key, eq, val = stripped.partition("=")
            if key.strip() != "period" or not val.strip():
                raise NetlistSyntaxError("expected 'period = <seconds>'", lineno, col)
            try:
                expressions.parse_expression(val)
            except expressions.ExpressionError as exc:
                raise NetlistSyntaxError(str(exc), lineno, text.find("=") + 2) from None
            heart = val.strip()
        elif section == "components":
            comps.append(_parse_component(text, tokens, lineno, col))
        elif section == "transport":
            transport.append((lineno, stripped))

    if not reference:
        raise MissingReferenceNodeError("no reference node: mark one node with 'ref'")
    if len(reference) > 1:
        raise MissingReferenceNodeError("more than one reference node", reference[1][1], 1)

    seen_ids: dict[str, int] = {}
    for c in comps:
        if c.id in seen_ids:
            raise DuplicateIdError(f"duplicate component id {c.id!r} (first on line {seen_ids[c.id]})", c.line, 1)
        seen_ids[c.id] = c.line
        for node in (c.node_from, c.node_to):
            if node not in node_lines:
                raise DanglingNodeError(f"component {c.id!r} references undeclared node {node!r}", c.line,
                                        _column_of(source, c.line, node))
        if c.node_from == c.node_to:
            raise NetlistSyntaxError(f"component {c.id!r} connects a node to itself", c.line, 1)

    known = set(params) | set(derived)
    for dname, expr in derived.items():
        for sym in expressions.symbols(expr):
            if sym not in known:
                raise UnresolvedParameterError(f"derived {dname!r} uses unknown symbol {sym!r}")
    for c in comps:
        for slot, tok in c.slot_tokens().items():
            if not isinstance(tok, str) or slot == "waveform":
                continue
            try:
                syms = expressions.symbols(tok)
            except expressions.ExpressionError as exc:
                raise NetlistSyntaxError(str(exc), c.line, _column_of(source, c.line, tok)) from None
            for sym in sorted(syms):
                if sym not in known:
                    raise UnresolvedParameterError(
                        f"component {c.id!r} uses unresolved parameter {sym!r}", c.line,
                        _column_of(source, c.line, sym))
    for text in list(init.values()) + ([heart] if heart else []):
        for sym in expressions.symbols(text):
            if sym not in known:
                raise UnresolvedParameterError(f"unknown symbol {sym!r} in {text!r}")
    try:
        _derived_order(derived)
    except NetlistError:
        raise

    net = Netlist(
        name=title or "netlist",
        nodes=tuple(nodes),
        reference=reference[0][0],
        components=tuple(comps),
        parameters=params,
        derived=derived,
        heart_period=heart,
        init=init,
        outputs=outputs,
        output_groups=output_groups,
        transport=tuple(transport),
        source=source,
    )
    needs_period = any(c.kind in ("ElastanceChamber",) or
                       (c.kind == "FlowSource" and c.slot_tokens()["waveform"] != "constant")
                       for c in comps)
    if needs_period and heart is None:
        raise NetlistSyntaxError("time-varying components require a [heart] period")
    _check_connected(net)
    return net


def _column_of(source: str, line: int, token: str) -> int:
    text = source.splitlines()[line - 1]
    pos = text.find(token)
    return pos + 1 if pos >= 0 else 1


def _parse_component(text: str, tokens: list[str], lineno: int, col: int) -> Component:
    kind = tokens[0]
    if kind not in KINDS:
        raise UnknownComponentError(f"unknown component kind {kind!r}", lineno, col)
    if len(tokens) < 4:
        raise NetlistSyntaxError("component line is '<Kind> <id> <from> <to> <params...>'", lineno, col)
    info = KINDS[kind]
    positional = []
    options: dict[str, object] = {}
    group = None
    for tok in tokens[4:]:
        if "=" in tok:
            key, _, val = tok.partition("=")
            if key == "group":
                group = val
            elif key in info.options:
                options[key] = float(val) if expressions.is_number(val) else val
            else:
                raise NetlistSyntaxError(f"unknown option {key!r} for {kind}", lineno, text.find(tok) + 1)
        else:
            if options:
                raise NetlistSyntaxError("positional parameter after options", lineno, text.find(tok) + 1)
            positional.append(float(tok) if expressions.is_number(tok) else tok)
    n_req, n_opt = len(info.slots), len(info.optional_slots)
    if not n_req <= len(positional) <= n_req + n_opt:
        raise NetlistSyntaxError(
            f"{kind} takes {n_req}{'-' + str(n_req + n_opt) if n_opt else ''} parameters, got {len(positional)}",
            lineno, col)
    return Component(tokens[1], kind, tokens[2], tokens[3], tuple(positional), options, group, lineno)


def _check_connected(net: Netlist) -> None:
    adj: dict[str, set[str]] = {n: set() for n in net.nodes}
    for c in net.components:
        adj[c.node_from].add(c.node_to)
        adj[c.node_to].add(c.node_from)
    start = net.reference
    seen = {start}
    stack = [start]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    missing = [n for n in net.nodes if n not in seen]
    if missing:
        raise DisconnectedNetworkError(f"nodes not connected to the network: {', '.join(missing)}")


def load_netlist(path) -> Netlist:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_netlist(text, name=None if "[netlist]" in text else path.stem)


def reference_netlist(name: str) -> Netlist:
    """Load one of the shipped reference netlists by stem (``model2_pah``)."""
    stem = name[:-4] if name.endswith(".net") else name
    path = Path(__file__).resolve().parent.parent / "data" / "netlists" / f"{stem}.net"
    if not path.exists():
        raise FileNotFoundError(path)
    return load_netlist(path)


def as_batch(values: Mapping[str, object]) -> tuple[dict[str, np.ndarray], int]:
    """Broadcast a mapping of scalars/arrays to 1-D arrays of a common length."""
    arrays = {k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in values.items()}
    sizes = {a.shape[0] for a in arrays.values() if a.shape[0] != 1}
    if len(sizes) > 1:
        raise ValueError(f"inconsistent batch sizes {sorted(sizes)}")
    size = sizes.pop() if sizes else 1
    return {k: np.broadcast_to(a, (size,)).copy() for k, a in arrays.items()}, size
