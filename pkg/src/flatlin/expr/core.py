"""Immutable, hash-consed expression trees over named scalar variables.

Nodes are interned: two structurally equal expressions are the same Python
object, so identity comparison is structural comparison and every traversal
can memoize on the node itself.  Expressions built through the public
helpers (``add``, ``mul``, the arithmetic operators, ``diff``...) receive a
light, value-preserving clean-up at construction time; the parser builds raw
nodes so that its output mirrors the input text.
"""

import math
import threading
import weakref

from ..errors import EvaluationError, ExprError, UnboundVariableError

__all__ = [
    "Expr", "Const", "Var", "Neg", "Add", "Sub", "Mul", "Div", "Pow",
    "Sin", "Cos", "Tan", "Sqrt", "Atan2",
    "const", "var", "neg", "add", "sub", "mul", "div", "power",
    "sin", "cos", "tan", "sqrt", "atan2", "as_expr",
    "ZERO", "ONE", "free_vars", "diff", "directional", "gradient", "substitute",
    "simplify", "normalize", "evaluate", "postorder", "count_nodes",
]

_TABLE = weakref.WeakValueDictionary()
_LOCK = threading.Lock()
_EMPTY = frozenset()


class Expr:
    """Base node.  ``args`` holds child expressions (or a payload for leaves)."""

    __slots__ = ("args", "free", "__weakref__")

    def __new__(cls, *args):
        key = (cls, args)
        node = _TABLE.get(key)
        if node is not None:
            return node
        node = object.__new__(cls)
        object.__setattr__(node, "args", args)
        object.__setattr__(node, "free", cls._free_of(args))
        with _LOCK:
            return _TABLE.setdefault(key, node)

    @staticmethod
    def _free_of(args):
        frees = [a.free for a in args if isinstance(a, Expr) and a.free]
        if not frees:
            return _EMPTY
        if len(frees) == 1:
            return frees[0]
        frees.sort(key=len, reverse=True)
        big = frees[0]
        rest = [f for f in frees[1:] if not f <= big]
        return big.union(*rest) if rest else big

    def __setattr__(self, name, value):
        raise AttributeError(f"{type(self).__name__} nodes are immutable")

    def __delattr__(self, name):
        raise AttributeError(f"{type(self).__name__} nodes are immutable")

    @property
    def children(self):
        return self.args

    def __reduce__(self):
        return (type(self), self.args)

    def __repr__(self):
        from .parser import to_string
        return f"Expr({to_string(self)!r})"

    def __str__(self):
        from .parser import to_string
        return to_string(self)

    # arithmetic sugar -- all routed through the simplifying constructors
    def __add__(self, other):
        return add(self, as_expr(other))

    def __radd__(self, other):
        return add(as_expr(other), self)

    def __sub__(self, other):
        return sub(self, as_expr(other))

    def __rsub__(self, other):
        return sub(as_expr(other), self)

    def __mul__(self, other):
        return mul(self, as_expr(other))

    def __rmul__(self, other):
        return mul(as_expr(other), self)

    def __truediv__(self, other):
        return div(self, as_expr(other))

    def __rtruediv__(self, other):
        return div(as_expr(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, n):
        return power(self, n)


class Const(Expr):
    __slots__ = ()

    def __new__(cls, value):
        value = float(value)
        if math.isnan(value):
            raise ExprError("NaN constant")
        if value == 0.0:
            value = 0.0
        return super().__new__(cls, value)

    @staticmethod
    def _free_of(args):
        return _EMPTY

    @property
    def children(self):
        return ()

    @property
    def value(self):
        return self.args[0]


class Var(Expr):
    __slots__ = ()

    def __new__(cls, name):
        if not isinstance(name, str) or not name:
            raise ExprError(f"invalid variable name {name!r}")
        return super().__new__(cls, name)

    @staticmethod
    def _free_of(args):
        return frozenset(args)

    @property
    def children(self):
        return ()

    @property
    def name(self):
        return self.args[0]


class Neg(Expr):
    __slots__ = ()


class Add(Expr):
    """n-ary sum, evaluated left to right."""
    __slots__ = ()


class Sub(Expr):
    __slots__ = ()


class Mul(Expr):
    """n-ary product, evaluated left to right."""
    __slots__ = ()


class Div(Expr):
    __slots__ = ()


class Pow(Expr):
    """Integer power ``base ^ exponent``."""

    __slots__ = ()

    def __new__(cls, base, exponent):
        if isinstance(exponent, float) and exponent.is_integer():
            exponent = int(exponent)
        if not isinstance(exponent, int) or isinstance(exponent, bool):
            raise ExprError(f"non-integer exponent {exponent!r}")
        return super().__new__(cls, base, exponent)

    @property
    def children(self):
        return self.args[:1]

    @property
    def base(self):
        return self.args[0]

    @property
    def exponent(self):
        return self.args[1]


class Sin(Expr):
    __slots__ = ()


class Cos(Expr):
    __slots__ = ()


class Tan(Expr):
    __slots__ = ()


class Sqrt(Expr):
    __slots__ = ()


class Atan2(Expr):
    """``atan2(y, x)``."""
    __slots__ = ()


FUNCTIONS = {"sin": Sin, "cos": Cos, "tan": Tan, "sqrt": Sqrt, "atan2": Atan2}
ZERO = Const(0.0)
ONE = Const(1.0)
_MINUS_ONE = Const(-1.0)


def as_expr(x):
    if isinstance(x, Expr):
        return x
    if isinstance(x, str):
        from .parser import parse
        return parse(x)
    if isinstance(x, (int, float)) or hasattr(x, "__float__"):
        return Const(x)
    raise TypeError(f"cannot convert {type(x).__name__} to Expr")


def const(x):
    return Const(x)


def var(name):
    return Var(name)


# -- simplifying constructors ----------------------------------------------------
#
# Every rewrite below returns a value that is bit-identical to the raw node
# for finite inputs: no reassociation, no reordering.  Flattening only absorbs
# a *leading* nested sum/product, which is how the n-ary node evaluates anyway.

def _is_const(e, value=None):
    return isinstance(e, Const) and (value is None or e.args[0] == value)


def neg(a):
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.args[0]
    return Neg(a)


def _nary(cls, terms, unit, fold):
    flat = []
    for i, t in enumerate(terms):
        if i == 0 and isinstance(t, cls):
            flat.extend(t.args)
        elif not _is_const(t, unit):
            flat.append(t)
    # fold a leading run of constants
    if len(flat) >= 2 and isinstance(flat[0], Const) and isinstance(flat[1], Const):
        acc = flat[0].value
        i = 1
        while i < len(flat) and isinstance(flat[i], Const):
            acc = fold(acc, flat[i].value)
            i += 1
        flat = [Const(acc)] + flat[i:]
    if flat and _is_const(flat[0], unit) and len(flat) > 1:
        flat = flat[1:]
    if not flat:
        return Const(unit)
    if len(flat) == 1:
        return flat[0]
    return cls(*flat)


def add(*terms):
    return _nary(Add, [as_expr(t) for t in terms], 0.0, lambda a, b: a + b)


def sub(a, b):
    a, b = as_expr(a), as_expr(b)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if a is b:
        return ZERO
    return Sub(a, b)


def mul(*factors):
    factors = [as_expr(f) for f in factors]
    if any(_is_const(f, 0.0) for f in factors):
        return ZERO
    out = _nary(Mul, factors, 1.0, lambda a, b: a * b)
    if isinstance(out, Mul) and len(out.args) == 2 and _is_const(out.args[0], -1.0):
        return neg(out.args[1])
    return out


def div(a, b):
    a, b = as_expr(a), as_expr(b)
    if _is_const(b, 1.0):
        return a
    if _is_const(b, -1.0):
        return neg(a)
    if _is_const(a, 0.0) and not _is_const(b, 0.0):
        return ZERO
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0.0:
        return Const(a.value / b.value)
    return Div(a, b)


def power(a, n):
    a = as_expr(a)
    if isinstance(n, Const):
        n = n.value
    if isinstance(n, float):
        if not n.is_integer():
            raise ExprError(f"non-integer exponent {n!r}")
        n = int(n)
    if n == 0:
        return ONE
    if n == 1:
        return a
    if isinstance(a, Const):
        if a.value == 0.0 and n < 0:
            return Pow(a, n)
        try:
            return Const(a.value ** n)
        except OverflowError:
            return Pow(a, n)
    return Pow(a, n)


def _unary(cls, fn, a, ok=lambda v: True):
    a = as_expr(a)
    if isinstance(a, Const) and ok(a.value):
        return Const(fn(a.value))
    return cls(a)


def sin(a):
    return _unary(Sin, math.sin, a)


def cos(a):
    return _unary(Cos, math.cos, a)


def tan(a):
    return _unary(Tan, math.tan, a)


def sqrt(a):
    return _unary(Sqrt, math.sqrt, a, ok=lambda v: v >= 0.0)


def atan2(y, x):
    y, x = as_expr(y), as_expr(x)
    if isinstance(y, Const) and isinstance(x, Const):
        return Const(math.atan2(y.value, x.value))
    return Atan2(y, x)


_REBUILD = {
    Neg: lambda n, c: neg(c[0]),
    Add: lambda n, c: add(*c),
    Sub: lambda n, c: sub(*c),
    Mul: lambda n, c: mul(*c),
    Div: lambda n, c: div(*c),
    Pow: lambda n, c: power(c[0], n.exponent),
    Sin: lambda n, c: sin(c[0]),
    Cos: lambda n, c: cos(c[0]),
    Tan: lambda n, c: tan(c[0]),
    Sqrt: lambda n, c: sqrt(c[0]),
    Atan2: lambda n, c: atan2(*c),
}


# -- traversal -------------------------------------------------------------------

def postorder(roots, prune=None):
    """Unique nodes reachable from ``roots``, children before parents.

    ``prune(node) -> True`` keeps the node but does not descend into it.
    Iterative, so arbitrarily deep expressions are fine.
    """
    order = []
    seen = set()
    stack = [(r, False) for r in reversed(list(roots))]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node in seen:
            continue
        seen.add(node)
        if prune is not None and prune(node):
            order.append(node)
            continue
        stack.append((node, True))
        for c in reversed(node.children):
            if c not in seen:
                stack.append((c, False))
    return order


def count_nodes(*roots):
    return len(postorder(roots))


def free_vars(*exprs):
    out = set()
    for e in exprs:
        out |= as_expr(e).free
    return out


def _map_nodes(roots, leaf, combine, prune=None):
    """Bottom-up rebuild; returns dict node -> image."""
    images = {}
    for node in postorder(roots, prune):
        if prune is not None and prune(node):
            images[node] = leaf(node)
        elif not node.children:
            images[node] = leaf(node)
        else:
            images[node] = combine(node, [images[c] for c in node.children])
    return images


# -- differentiation ---------------------------------------------------------------

def _derivative(node, d):
    """Derivative of ``node`` given derivatives ``d`` of its children."""
    t = type(node)
    a = node.args
    if t is Neg:
        return neg(d[0])
    if t is Add:
        return add(*d)
    if t is Sub:
        return sub(d[0], d[1])
    if t is Mul:
        terms = []
        for i, di in enumerate(d):
            if di is ZERO:
                continue
            others = [f for j, f in enumerate(a) if j != i]
            terms.append(mul(*others, di))
        return add(*terms)
    if t is Div:
        num, den = a
        return sub(div(d[0], den), div(mul(num, d[1]), power(den, 2)))
    if t is Pow:
        base, n = a
        return mul(Const(n), power(base, n - 1), d[0])
    if t is Sin:
        return mul(cos(a[0]), d[0])
    if t is Cos:
        return neg(mul(sin(a[0]), d[0]))
    if t is Tan:
        return div(d[0], power(cos(a[0]), 2))
    if t is Sqrt:
        return div(d[0], mul(Const(2.0), node))
    if t is Atan2:
        y, x = a
        return div(sub(mul(x, d[0]), mul(y, d[1])), add(power(x, 2), power(y, 2)))
    raise ExprError(f"cannot differentiate {t.__name__}")


def diff(e, v):
    """Symbolic partial derivative of ``e`` with respect to variable ``v``."""
    e = as_expr(e)
    name = v.name if isinstance(v, Var) else v
    if name not in e.free:
        return ZERO

    def prune(node):
        return name not in node.free

    def leaf(node):
        if isinstance(node, Var) and node.name == name:
            return ONE
        return ZERO

    images = _map_nodes([e], leaf, _derivative, prune)
    return images[e]


def directional(e, seeds):
    """Derivative of ``e`` along ``seeds`` ({name: Expr}), in one pass.

    Equals ``sum(seeds[v] * diff(e, v))`` but shares work across variables;
    with seeds mapping each jet coordinate to its successor this is the total
    time derivative.
    """
    e = as_expr(e)
    seeds = {(k.name if isinstance(k, Var) else k): as_expr(v) for k, v in seeds.items()}
    keys = frozenset(seeds)
    if not (e.free & keys):
        return ZERO

    def prune(node):
        return not (node.free & keys)

    def leaf(node):
        if isinstance(node, Var) and node.name in seeds:
            return seeds[node.name]
        return ZERO

    return _map_nodes([e], leaf, _derivative, prune)[e]


def gradient(e, names):
    return [diff(e, n) for n in names]


# -- substitution / simplification --------------------------------------------------

def substitute(e, mapping):
    """Simultaneous substitution ``{name: Expr}``; no cascading."""
    e = as_expr(e)
    mapping = {(k.name if isinstance(k, Var) else k): as_expr(v) for k, v in mapping.items()}
    keys = frozenset(mapping)
    if not (e.free & keys):
        return e

    def prune(node):
        return not (node.free & keys)

    def leaf(node):
        if isinstance(node, Var) and node.name in mapping:
            return mapping[node.name]
        return node

    def combine(node, kids):
        return _REBUILD[type(node)](node, kids)

    return _map_nodes([e], leaf, combine, prune)[e]


def substitute_many(exprs, mapping):
    """``substitute`` over a list sharing one traversal (keeps DAG sharing)."""
    exprs = [as_expr(e) for e in exprs]
    mapping = {(k.name if isinstance(k, Var) else k): as_expr(v) for k, v in mapping.items()}
    keys = frozenset(mapping)

    def prune(node):
        return not (node.free & keys)

    def leaf(node):
        if isinstance(node, Var) and node.name in mapping:
            return mapping[node.name]
        return node

    def combine(node, kids):
        return _REBUILD[type(node)](node, kids)

    images = _map_nodes(exprs, leaf, combine, prune)
    return [images[e] for e in exprs]


def simplify(e):
    """Conservative clean-up: constant folding, 0/1 identities, sin(0)/cos(0),
    and flattening of left-nested sums and products.  Never reorders or
    reassociates, so the value is unchanged bit for bit at finite points."""
    e = as_expr(e)
    images = _map_nodes([e], lambda n: n, lambda n, kids: _REBUILD[type(n)](n, kids))
    return images[e]


def normalize(e):
    """Structural normal form used by the printer round-trip: left-nested
    sums/products flattened and negated literals folded, nothing else."""
    e = as_expr(e)

    def combine(node, kids):
        t = type(node)
        if t in (Add, Mul):
            flat = list(kids[0].args) if isinstance(kids[0], t) else [kids[0]]
            return t(*flat, *kids[1:])
        if t is Neg and isinstance(kids[0], Const):
            return Const(-kids[0].value)
        if t is Pow:
            return Pow(kids[0], node.exponent)
        return t(*kids)

    return _map_nodes([e], lambda n: n, combine)[e]


# -- evaluation ------------------------------------------------------------------

def _apply(node, vals):
    t = type(node)
    if t is Add:
        acc = vals[0]
        for v in vals[1:]:
            acc = acc + v
        return acc
    if t is Mul:
        acc = vals[0]
        for v in vals[1:]:
            acc = acc * v
        return acc
    if t is Sub:
        return vals[0] - vals[1]
    if t is Neg:
        return -vals[0]
    if t is Div:
        if vals[1] == 0.0:
            raise EvaluationError("division by zero")
        return vals[0] / vals[1]
    if t is Pow:
        b, n = vals[0], node.exponent
        if b == 0.0 and n < 0:
            raise EvaluationError("division by zero (negative power of zero)")
        return b ** n
    if t is Sin:
        return math.sin(vals[0])
    if t is Cos:
        return math.cos(vals[0])
    if t is Tan:
        return math.tan(vals[0])
    if t is Sqrt:
        if vals[0] < 0.0:
            raise EvaluationError("sqrt of negative argument")
        return math.sqrt(vals[0])
    if t is Atan2:
        return math.atan2(vals[0], vals[1])
    raise ExprError(f"cannot evaluate {t.__name__}")


def evaluate(e, binding):
    """Evaluate ``e`` at ``binding`` (mapping name -> real) in double precision."""
    e = as_expr(e)
    missing = e.free - binding.keys()
    if missing:
        raise UnboundVariableError(missing)
    vals = {}
    try:
        for node in postorder([e]):
            if isinstance(node, Const):
                vals[node] = node.value
            elif isinstance(node, Var):
                vals[node] = float(binding[node.name])
            else:
                vals[node] = _apply(node, [vals[c] for c in node.children])
    except OverflowError as exc:
        raise EvaluationError(f"overflow: {exc}") from None
    return vals[e]
