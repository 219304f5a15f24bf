"""Compile expression DAGs into straight-line Python functions.

Each unique node becomes one assignment, so shared subexpressions across all
outputs are evaluated once.  Two backends:

* ``"math"``  -- scalar floats via :mod:`math`; singularities raise
  :class:`EvaluationError` exactly like :func:`evaluate`.
* ``"numpy"`` -- element-wise over arrays (whole trajectories at once);
  floating-point faults are turned into :class:`EvaluationError` as well.
"""

import math

import numpy as np

from ..errors import EvaluationError, UnboundVariableError
from .core import (
    Add, Atan2, Const, Cos, Div, Mul, Neg, Pow, Sin, Sqrt, Sub, Tan, Var,
    as_expr, postorder,
)

__all__ = ["compile_exprs", "CompiledFunction"]

_FN = {Sin: "sin", Cos: "cos", Tan: "tan", Sqrt: "sqrt", Atan2: "atan2"}


def _emit(order, index, backend):
    lines = []
    names = {}
    for k, node in enumerate(order):
        t = type(node)
        if t is Const:
            names[node] = repr(node.value)
            continue
        if t is Var:
            names[node] = f"x[{index[node.name]}]"
            continue
        a = [names[c] for c in node.children]
        if t is Add:
            rhs = " + ".join(a)
        elif t is Mul:
            rhs = " * ".join(f"({s})" if s.startswith("-") else s for s in a)
        elif t is Sub:
            rhs = f"{a[0]} - ({a[1]})" if a[1].startswith("-") else f"{a[0]} - {a[1]}"
        elif t is Neg:
            rhs = f"-({a[0]})"
        elif t is Div:
            rhs = f"{a[0]} / ({a[1]})"
        elif t is Pow:
            n = node.exponent
            rhs = f"({a[0]}) ** ({n})"
        elif t is Atan2:
            rhs = f"_atan2({a[0]}, {a[1]})"
        else:
            rhs = f"_{_FN[t]}({a[0]})"
        var = f"t{k}"
        lines.append(f"    {var} = {rhs}")
        names[node] = var
    return lines, names


class CompiledFunction:
    """Callable evaluating several expressions at once.

    ``f(x)`` takes a sequence (or array) ordered like ``variables`` and
    returns a float64 array of outputs.  With the numpy backend, ``x`` may
    hold arrays of a common shape, giving outputs of shape ``(n_out, *shape)``.
    """

    def __init__(self, exprs, variables, backend="math"):
        self.exprs = [as_expr(e) for e in exprs]
        self.variables = list(variables)
        self.backend = backend
        index = {v: i for i, v in enumerate(self.variables)}
        missing = set()
        for e in self.exprs:
            missing |= e.free - index.keys()
        if missing:
            raise UnboundVariableError(missing)
        order = postorder(self.exprs)
        lines, names = _emit(order, index, backend)
        outs = ", ".join(names[e] for e in self.exprs)
        self.source = "\n".join(["def _f(x):", *lines, f"    return ({outs}{',' if len(self.exprs) == 1 else ''})"])
        self.n_nodes = len(lines)
        ns = {}
        if backend == "math":
            ns.update(_sin=math.sin, _cos=math.cos, _tan=math.tan,
                      _sqrt=math.sqrt, _atan2=math.atan2)
        elif backend == "numpy":
            ns.update(_sin=np.sin, _cos=np.cos, _tan=np.tan,
                      _sqrt=np.sqrt, _atan2=np.arctan2)
        else:
            raise ValueError(f"unknown backend {backend!r}")
        exec(compile(self.source, "<flatlin-codegen>", "exec"), ns)
        self._raw = ns["_f"]

    def __len__(self):
        return len(self.exprs)

    def raw(self, x):
        """Unchecked call returning a tuple; ``x`` must hold Python floats for
        the math backend."""
        return self._raw(x)

    def __call__(self, x):
        if self.backend == "math":
            x = np.asarray(x, dtype=float).ravel().tolist()
            if len(x) != len(self.variables):
                raise ValueError(f"expected {len(self.variables)} values, got {len(x)}")
            try:
                out = self._raw(x)
            except ZeroDivisionError:
                raise EvaluationError("division by zero") from None
            except (ValueError, OverflowError) as exc:
                raise EvaluationError(f"domain error: {exc}") from None
            return np.array(out, dtype=float)
        x = [np.asarray(xi, dtype=float) for xi in x]
        with np.errstate(divide="raise", invalid="raise", over="raise"):
            try:
                out = self._raw(x)
            except FloatingPointError as exc:
                raise EvaluationError(f"floating-point fault: {exc}") from None
        shape = np.broadcast_shapes(*(np.shape(o) for o in out), *(xi.shape for xi in x))
        return np.stack([np.broadcast_to(o, shape) for o in out])

    def at(self, binding):
        """Evaluate at a name -> value mapping."""
        return self([binding[v] for v in self.variables])


def compile_exprs(exprs, variables, backend="math"):
    return CompiledFunction(exprs, variables, backend)
