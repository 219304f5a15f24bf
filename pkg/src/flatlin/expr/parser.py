"""Text front end: recursive-descent parser and a fully parenthesized printer.

Grammar (lowest to highest precedence)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := primary ('^' unary)?
    primary := NUMBER | NAME | NAME '(' args ')' | '(' expr ')'

``^`` binds tighter than unary minus, so ``-x^2`` is ``-(x^2)``; the exponent
must fold to an integer constant.
"""

import re

from ..errors import NonIntegerExponentError, ParseError
from .core import (
    FUNCTIONS, Add, Atan2, Const, Div, Expr, Mul, Neg, Pow, Sub, Var,
    evaluate, postorder,
)

__all__ = ["parse", "to_string"]

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^(),])
""", re.VERBOSE)

_ARITY = {"sin": 1, "cos": 1, "tan": 1, "sqrt": 1, "atan2": 2}


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", text, pos)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append((kind, m.group(), pos))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, tok, pos = self.take()
        if tok != value:
            found = "end of input" if kind == "end" else repr(tok)
            raise ParseError(f"expected {value!r}, found {found}", self.text, pos)

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.term()
            if op == "-":
                node = Sub(node, rhs)
            elif isinstance(node, Add):
                node = Add(*node.args, rhs)
            else:
                node = Add(node, rhs)
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.unary()
            if op == "/":
                node = Div(node, rhs)
            elif isinstance(node, Mul):
                node = Mul(*node.args, rhs)
            else:
                node = Mul(node, rhs)
        return node

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            operand = self.unary()
            if isinstance(operand, Const):
                return Const(-operand.value)
            return Neg(operand)
        return self.power()

    def power(self):
        base = self.primary()
        if self.peek()[1] != "^":
            return base
        pos = self.take()[2]
        exponent = self.unary()
        if exponent.free:
            raise NonIntegerExponentError("exponent must be an integer constant", self.text, pos)
        value = evaluate(exponent, {})
        if not float(value).is_integer():
            raise NonIntegerExponentError(
                f"non-integer exponent {value!r}", self.text, pos)
        return Pow(base, int(value))

    def primary(self):
        kind, tok, pos = self.take()
        if kind == "num":
            return Const(float(tok))
        if kind == "name":
            if self.peek()[1] == "(":
                return self.call(tok, pos)
            return Var(tok)
        if tok == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(tok)
        raise ParseError(f"unexpected {found}", self.text, pos)

    def call(self, name, pos):
        if name not in FUNCTIONS:
            raise ParseError(f"unknown function {name!r}", self.text, pos)
        self.expect("(")
        args = [self.expr()]
        while self.peek()[1] == ",":
            self.take()
            args.append(self.expr())
        self.expect(")")
        if len(args) != _ARITY[name]:
            raise ParseError(
                f"{name} takes {_ARITY[name]} argument(s), got {len(args)}", self.text, pos)
        return FUNCTIONS[name](*args)


def parse(text):
    """Parse ``text`` into an expression tree in normal form.

    Only left-nested sums/products are flattened and negated literals folded
    (see ``normalize``); no other simplification is applied.
    """
    if not isinstance(text, str):
        raise TypeError("parse expects a string")
    p = _Parser(text)
    node = p.expr()
    kind, tok, pos = p.peek()
    if kind != "end":
        raise ParseError(f"unexpected {tok!r}", text, pos)
    return node


def _const_text(v):
    s = repr(float(v))
    if s in ("inf", "-inf"):
        raise ValueError("cannot print an infinite constant")
    return f"({s})" if v < 0 else s


_INFIX = {Add: " + ", Mul: " * ", Sub: " - ", Div: " / "}
_FNAME = {cls: name for name, cls in FUNCTIONS.items()}


def to_string(e):
    """Fully parenthesized infix text; ``parse(to_string(e))`` normalizes to ``e``."""
    if not isinstance(e, Expr):
        raise TypeError("to_string expects an Expr")
    text = {}
    for node in postorder([e]):
        t = type(node)
        if t is Const:
            s = _const_text(node.value)
        elif t is Var:
            s = node.name
        elif t is Neg:
            s = f"(-{text[node.args[0]]})"
        elif t in (Add, Mul):
            parts = [text[c] for c in node.args]
            s = parts[0]
            for part in parts[1:]:
                s = f"({s}{_INFIX[t]}{part})"
        elif t in (Sub, Div):
            s = f"({text[node.args[0]]}{_INFIX[t]}{text[node.args[1]]})"
        elif t is Pow:
            n = node.exponent
            s = f"({text[node.base]} ^ {n if n >= 0 else f'({n})'})"
        elif t is Atan2:
            s = f"atan2({text[node.args[0]]}, {text[node.args[1]]})"
        else:
            s = f"{_FNAME[t]}({text[node.args[0]]})"
        text[node] = s
    return text[e]
