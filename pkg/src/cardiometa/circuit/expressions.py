"""Restricted arithmetic expressions used inside netlist files.

Derived parameters, initial conditions and the heart period may be written
as small formulas over other parameters (``PVR * r / (1 + r)``).  Only
arithmetic, a handful of numpy functions and named symbols are accepted; the
evaluation is vectorised so batched parameter arrays flow straight through.
"""
from __future__ import annotations

import ast
import math
from typing import Mapping

import numpy as np

_FUNCTIONS = {
    "sqrt": np.sqrt,
    "exp": np.exp,
    "log": np.log,
    "abs": np.abs,
    "min": np.minimum,
    "max": np.maximum,
}
_CONSTANTS = {"pi": math.pi, "e": math.e}

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


class ExpressionError(ValueError):
    pass


def parse_expression(text: str) -> ast.Expression:
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse expression {text!r}: {exc.msg}") from None
    for node in ast.walk(tree):
        if isinstance(node, (ast.Expression, ast.Load, ast.operator, ast.unaryop)):
            continue
        if isinstance(node, (ast.BinOp, ast.UnaryOp, ast.Name)):
            continue
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            continue
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCTIONS:
            continue
        raise ExpressionError(f"unsupported construct in expression {text!r}")
    return tree


def symbols(text: str) -> set[str]:
    """Names an expression refers to (functions and constants excluded)."""
    tree = parse_expression(text)
    called = {n.func.id for n in ast.walk(tree) if isinstance(n, ast.Call)}
    return {
        n.id for n in ast.walk(tree)
        if isinstance(n, ast.Name) and n.id not in called and n.id not in _CONSTANTS
    }


def evaluate(text: str, scope: Mapping[str, object]):
    tree = parse_expression(text)

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id in scope:
                return scope[node.id]
            if node.id in _CONSTANTS:
                return _CONSTANTS[node.id]
            raise ExpressionError(f"unknown symbol {node.id!r} in {text!r}")
        if isinstance(node, ast.BinOp):
            op = _BINOPS.get(type(node.op))
            if op is None:
                raise ExpressionError(f"unsupported operator in {text!r}")
            return op(ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp):
            val = ev(node.operand)
            if isinstance(node.op, ast.USub):
                return np.negative(val)
            if isinstance(node.op, ast.UAdd):
                return val
            raise ExpressionError(f"unsupported unary operator in {text!r}")
        if isinstance(node, ast.Call):
            return _FUNCTIONS[node.func.id](*[ev(a) for a in node.args])
        raise ExpressionError(f"unsupported construct in {text!r}")

    with np.errstate(divide="ignore", invalid="ignore"):
        return ev(tree)


def is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True
