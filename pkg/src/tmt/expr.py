"""Restricted arithmetic expressions in ``x1``, ``x2`` compiled to numpy."""
from __future__ import annotations

import ast
from typing import Callable

import numpy as np

_FUNCS = {"exp": np.exp, "sin": np.sin, "cos": np.cos, "sqrt": np.sqrt, "log": np.log}
_CONSTS = {"pi": np.pi, "e": np.e}
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


class ExpressionError(ValueError):
    pass


def _build(node):
    if isinstance(node, ast.Expression):
        return _build(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        c = float(node.value)
        return lambda x1, x2: c
    if isinstance(node, ast.Name):
        if node.id == "x1":
            return lambda x1, x2: x1
        if node.id == "x2":
            return lambda x1, x2: x2
        if node.id in _CONSTS:
            c = _CONSTS[node.id]
            return lambda x1, x2: c
        raise ExpressionError(f"unknown name {node.id!r}")
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        op = _BINOPS[type(node.op)]
        left, right = _build(node.left), _build(node.right)
        return lambda x1, x2: op(left(x1, x2), right(x1, x2))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        inner = _build(node.operand)
        if isinstance(node.op, ast.USub):
            return lambda x1, x2: -inner(x1, x2)
        return inner
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS:
        if len(node.args) != 1 or node.keywords:
            raise ExpressionError(f"{node.func.id} takes exactly one argument")
        fn = _FUNCS[node.func.id]
        arg = _build(node.args[0])
        return lambda x1, x2: fn(arg(x1, x2))
    raise ExpressionError(f"unsupported syntax: {ast.dump(node)[:60]}")


def compile_expression(text: str) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Compile e.g. ``"0.1*(x1^2+x2^2)"``; ``^`` means power."""
    try:
        tree = ast.parse(text.replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None
    fn = _build(tree)

    def evaluate(x1, x2):
        x1 = np.asarray(x1, dtype=float)
        return np.broadcast_to(fn(x1, np.asarray(x2, dtype=float)), np.broadcast(x1, x2).shape) + 0.0

    return evaluate
