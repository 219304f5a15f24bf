"""Symbolic expressions: construction, parsing, calculus and compilation."""

from .core import (
    Add, Atan2, Const, Cos, Div, Expr, Mul, Neg, ONE, Pow, Sin, Sqrt, Sub, Tan,
    Var, ZERO, add, as_expr, atan2, const, cos, count_nodes, diff, directional, div,
    evaluate, free_vars, gradient, mul, neg, normalize, postorder, power,
    simplify, sin, sqrt, sub, substitute, substitute_many, tan, var,
)
from .parser import parse, to_string
from .codegen import CompiledFunction, compile_exprs

__all__ = [
    "Add", "Atan2", "Const", "Cos", "Div", "Expr", "Mul", "Neg", "ONE", "Pow",
    "Sin", "Sqrt", "Sub", "Tan", "Var", "ZERO", "add", "as_expr", "atan2",
    "const", "cos", "count_nodes", "diff", "directional", "div", "evaluate", "free_vars",
    "gradient", "mul", "neg", "normalize", "postorder", "power", "simplify",
    "sin", "sqrt", "sub", "substitute", "substitute_many", "tan", "var",
    "parse", "to_string", "CompiledFunction", "compile_exprs",
]
