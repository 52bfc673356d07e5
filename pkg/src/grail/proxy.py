"""Closed-form proxy expressions over the offset variables ``dx`` and ``dy``.

Grammar (one expression per ``.proxy`` file, ``#`` starts a comment)::

    expression := term (('+' | '-') term)*
    term       := unary (('*' | '/') unary)*
    unary      := ('-' | '+') unary | power
    power      := primary ('^' unary)?
    primary    := NUMBER | 'dx' | 'dy' | NAME '(' expression (',' expression)* ')'
                | '(' expression ')'

Functions: sigmoid, tanh, exp, abs, min(a,b), max(a,b), clamp01, gauss(x, s)
with ``gauss(x, s) = exp(-x^2 / (2 s^2))``.

Evaluation is total: ``a/0`` is ``+-1e30`` by the sign of ``a`` (``0/0`` is 0),
overflow saturates, NaN becomes 0, and the result is clamped to [0, 1].
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ProxySyntaxError, UnknownFunction, UnknownVariable

BIG = 1e30
VARIABLES = ("dx", "dy")


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def _safe_div(a, b):
    a, b = np.broadcast_arrays(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    zero = b == 0
    out = np.divide(a, np.where(zero, 1.0, b))
    fill = np.where(a == 0, 0.0, np.copysign(BIG, a))
    return np.where(zero, fill, out)


def _gauss(x, s):
    return np.exp(-_safe_div(x * x, 2 * s * s))


FUNCTIONS = {
    "sigmoid": (1, _sigmoid),
    "tanh": (1, np.tanh),
    "exp": (1, np.exp),
    "abs": (1, np.abs),
    "min": (2, np.minimum),
    "max": (2, np.maximum),
    "clamp01": (1, lambda x: np.clip(x, 0.0, 1.0)),
    "gauss": (2, _gauss),
}

_BINARY = {
    "+": np.add,
    "-": np.subtract,
    "*": np.multiply,
    "/": _safe_div,
    "^": np.power,
}
_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 3}


@dataclass(frozen=True)
class Num:
    value: float

    def eval(self, dx, dy):
        return np.full(np.broadcast(dx, dy).shape, self.value)

    def __str__(self):
        return repr(self.value) if self.value >= 0 else f"({self.value!r})"


@dataclass(frozen=True)
class Var:
    name: str

    def eval(self, dx, dy):
        return np.asarray(dx if self.name == "dx" else dy, dtype=np.float64)

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Neg:
    arg: object

    def eval(self, dx, dy):
        return -self.arg.eval(dx, dy)

    def __str__(self):
        return f"(-{self.arg})"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object

    def eval(self, dx, dy):
        return _BINARY[self.op](self.left.eval(dx, dy), self.right.eval(dx, dy))

    def __str__(self):
        return f"({self.left} {self.op} {self.right})"


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple

    def eval(self, dx, dy):
        return FUNCTIONS[self.fn][1](*(a.eval(dx, dy) for a in self.args))

    def __str__(self):
        return f"{self.fn}({', '.join(str(a) for a in self.args)})"


def _fold(node):
    """Replace constant sub-expressions by their value."""
    if isinstance(node, Neg):
        arg = _fold(node.arg)
        return Num(float(-arg.value)) if isinstance(arg, Num) else Neg(arg)
    if isinstance(node, BinOp):
        left, right = _fold(node.left), _fold(node.right)
        if isinstance(left, Num) and isinstance(right, Num):
            return Num(_scalar(BinOp(node.op, left, right)))
        return BinOp(node.op, left, right)
    if isinstance(node, Call):
        args = tuple(_fold(a) for a in node.args)
        if all(isinstance(a, Num) for a in args):
            return Num(_scalar(Call(node.fn, args)))
        return Call(node.fn, args)
    return node


def _scalar(node):
    with np.errstate(all="ignore"):
        v = float(node.eval(0.0, 0.0))
    if math.isnan(v):
        return 0.0
    return max(-BIG, min(BIG, v))


_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<comment>\#[^\n]*)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^(),])
""", re.VERBOSE)


def _tokens(text):
    out = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if m is None:
            raise ProxySyntaxError(f"unexpected character {text[pos]!r}", line, col,
                                   "number, name, operator or parenthesis")
        kind, chunk = m.lastgroup, m.group()
        if kind not in ("ws", "comment"):
            out.append((kind, chunk, line, col))
        if "\n" in chunk:
            line += chunk.count("\n")
            line_start = pos + chunk.rfind("\n") + 1
        pos = m.end()
    out.append(("eof", "", line, pos - line_start + 1))
    return out


class _Parser:
    def __init__(self, text):
        self.toks = _tokens(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self, text=None, kind=None, what=None):
        k, t, line, col = self.peek()
        if (text is not None and t != text) or (kind is not None and k != kind):
            found = "end of input" if k == "eof" else repr(t)
            raise ProxySyntaxError(f"unexpected {found}", line, col, what or repr(text or kind))
        self.i += 1
        return self.toks[self.i - 1]

    def parse(self):
        node = self.expression()
        self.take(kind="eof", what="end of input")
        return node

    def expression(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[0] == "op" and self.peek()[1] in ("-", "+"):
            op = self.take()[1]
            arg = self.unary()
            return Neg(arg) if op == "-" else arg
        return self.power()

    def power(self):
        base = self.primary()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def primary(self):
        kind, text, line, col = self.peek()
        if kind == "num":
            self.take()
            return Num(float(text))
        if kind == "name":
            self.take()
            if self.peek()[1] == "(":
                if text not in FUNCTIONS:
                    raise UnknownFunction(f"unknown function {text!r} at line {line}, column {col}"
                                          f"; known: {', '.join(sorted(FUNCTIONS))}")
                self.take("(")
                args = [self.expression()]
                while self.peek()[1] == ",":
                    self.take(",")
                    args.append(self.expression())
                self.take(")", what="',' or ')'")
                arity = FUNCTIONS[text][0]
                if len(args) != arity:
                    raise ProxySyntaxError(f"{text} takes {arity} argument(s), got {len(args)}",
                                           line, col)
                return Call(text, tuple(args))
            if text not in VARIABLES:
                raise UnknownVariable(f"unknown variable {text!r} at line {line}, column {col}"
                                      "; only dx and dy are allowed")
            return Var(text)
        if text == "(":
            self.take("(")
            node = self.expression()
            self.take(")", what="')'")
            return node
        found = "end of input" if kind == "eof" else repr(text)
        raise ProxySyntaxError(f"unexpected {found}", line, col, "number, name or '('")


@dataclass(frozen=True)
class ProxyFn:
    """A parsed proxy: maps offset arrays to soft truth values in [0, 1]."""

    predicate: str
    expr: object
    source: str = ""

    def __call__(self, dx, dy):
        with np.errstate(all="ignore"):
            out = np.asarray(self.expr.eval(dx, dy), dtype=np.float64)
        out = np.nan_to_num(out, nan=0.0, posinf=1.0, neginf=0.0)
        return np.clip(out, 0.0, 1.0)

    def __str__(self):
        return str(self.expr)


def parse_proxy(text: str, predicate: str = "") -> ProxyFn:
    if isinstance(text, (bytes, bytearray)):
        text = bytes(text).decode("utf-8")
    return ProxyFn(predicate, _fold(_Parser(text).parse()), text)


def load_proxy(path) -> ProxyFn:
    path = Path(path)
    return parse_proxy(path.read_text(encoding="utf-8"), predicate=path.stem)


def load_proxy_dir(directory) -> dict:
    """Load every ``<predicate>.proxy`` file in a directory."""
    return {p.stem: load_proxy(p) for p in sorted(Path(directory).glob("*.proxy"))}
