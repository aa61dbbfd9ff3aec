"""Tiny closed grammar for regulator functions.

Allowed: numeric constants, the coordinates ``x1``, ``x2`` (``x`` is an alias
for ``x1``), the builtin ``p`` (= prod_j (1 + x_j^2)^2), unary minus, ``+``,
``-``, ``*`` and powers written ``**`` or ``^``. Anything else is rejected.
"""
from __future__ import annotations

import ast
import operator

import numpy as np

from .spectral import weight_density

__all__ = ["RegulatorSyntaxError", "parse_regulator", "evaluate_regulator"]

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Pow: operator.pow}


class RegulatorSyntaxError(ValueError):
    pass


def _is_constant(node) -> bool:
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        return _is_constant(node.operand)
    return isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool)


def parse_regulator(expr: str, dim: int):
    """Compile ``expr`` into a function of the ``(n, dim)`` node array."""
    if not isinstance(expr, str) or not expr.strip():
        raise RegulatorSyntaxError("regulator must be a non-empty expression string")
    try:
        tree = ast.parse(expr.replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise RegulatorSyntaxError(f"cannot parse regulator {expr!r}: {exc.msg}") from None

    names = {f"x{k + 1}": k for k in range(dim)}
    names["x"] = 0

    def build(node):
        if isinstance(node, ast.Expression):
            return build(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            c = float(node.value)
            return lambda X: np.full(X.shape[0], c)
        if isinstance(node, ast.Name):
            if node.id == "p":
                return lambda X: 1.0 / weight_density(X)
            if node.id in names:
                k = names[node.id]
                return lambda X: X[:, k]
            raise RegulatorSyntaxError(f"unknown name {node.id!r} in regulator")
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            inner = build(node.operand)
            if isinstance(node.op, ast.USub):
                return lambda X: -inner(X)
            return inner
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            if isinstance(node.op, ast.Pow) and not _is_constant(node.right):
                raise RegulatorSyntaxError("exponents must be numeric constants")
            op = _BINOPS[type(node.op)]
            left, right = build(node.left), build(node.right)
            return lambda X: op(left(X), right(X))
        raise RegulatorSyntaxError(f"unsupported construct {ast.dump(node)[:40]!r} in regulator")

    return build(tree)


def evaluate_regulator(expr: str, grid) -> np.ndarray:
    fn = parse_regulator(expr, grid.dim)
    with np.errstate(all="ignore"):
        values = np.asarray(fn(np.asarray(grid.nodes)), dtype=float)
    return values
