"""Prolog-like rule language for policy and blending programs.

Surface syntax::

    % comment
    up_ladder(X) :- on_ladder(P,L), same_level_ladder(P,L).

Predicates must be declared (see :func:`load_decls`). Clause weights are not
part of the text; every parsed clause starts at logit 0.0.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ProgramSyntaxError, ValidationError

KINDS = ("action", "blend", "type", "status", "spatial")
STATE_KINDS = ("type", "status", "spatial")
BLEND_HEADS = ("neural_agent", "logic_agent")
WORLD = "world"
ANY = "*"

VAR_RE = re.compile(r"[A-Z][A-Za-z0-9_]*\Z")
CONST_RE = re.compile(r"[a-z][a-z0-9_]*\Z")


@dataclass(frozen=True)
class Variable:
    name: str

    def __post_init__(self):
        if not VAR_RE.match(self.name):
            raise ValueError(f"bad variable name {self.name!r}")

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Constant:
    name: str

    def __post_init__(self):
        if not CONST_RE.match(self.name):
            raise ValueError(f"bad constant name {self.name!r}")

    def __str__(self):
        return self.name


Term = Variable | Constant


@dataclass(frozen=True)
class Atom:
    predicate: str
    args: tuple = ()

    def __str__(self):
        if not self.args:
            return self.predicate
        return f"{self.predicate}({','.join(str(a) for a in self.args)})"

    def variables(self):
        return [a for a in self.args if isinstance(a, Variable)]


@dataclass(frozen=True)
class Clause:
    head: Atom
    body: tuple
    weight: float = 0.0

    def __str__(self):
        return f"{self.head} :- {', '.join(str(b) for b in self.body)}."

    def variables(self):
        seen = []
        for atom in (self.head, *self.body):
            for v in atom.variables():
                if v not in seen:
                    seen.append(v)
        return seen


@dataclass(frozen=True)
class PredicateDecl:
    """``arg_types`` entries are object type names, ``"world"`` or ``"*"``."""

    name: str
    kind: str
    arg_types: tuple = ()

    @property
    def arity(self):
        return len(self.arg_types)

    @property
    def global_slots(self):
        return tuple(i for i, t in enumerate(self.arg_types) if t == WORLD)


@dataclass
class Decls:
    predicates: dict = field(default_factory=dict)

    def __getitem__(self, name) -> PredicateDecl:
        return self.predicates[name]

    def __contains__(self, name):
        return name in self.predicates

    def __iter__(self):
        return iter(self.predicates.values())

    def of_kind(self, *kinds):
        return [d for d in self.predicates.values() if d.kind in kinds]

    @property
    def actions(self):
        return [d.name for d in self.of_kind("action")]

    @property
    def state_predicates(self):
        """Status and spatial predicates in declaration order."""
        return [d.name for d in self.of_kind("status", "spatial")]

    @property
    def spatial(self):
        return [d.name for d in self.of_kind("spatial")]


@dataclass
class LogicProgram:
    clauses: list
    decls: Decls

    def __eq__(self, other):
        if not isinstance(other, LogicProgram):
            return NotImplemented
        return self.clauses == other.clauses

    def __len__(self):
        return len(self.clauses)

    @property
    def head_predicates(self):
        out = []
        for c in self.clauses:
            if c.head.predicate not in out:
                out.append(c.head.predicate)
        return out

    def with_weights(self, weights):
        return LogicProgram([replace(c, weight=float(w)) for c, w in zip(self.clauses, weights)],
                            self.decls)


def make_decls(spec: Mapping) -> Decls:
    """Build declarations from ``{name: {"kind": ..., "args": [...]}}``.

    The ``type`` predicate is always available.
    """
    preds = {"type": PredicateDecl("type", "type", (ANY, ANY))}
    for name, entry in spec.items():
        kind = entry.get("kind")
        if kind not in KINDS:
            raise ValidationError(f"predicate {name!r} has unknown kind {kind!r}")
        args = tuple(entry.get("args", ()))
        if kind in ("spatial", "type") and len(args) != 2:
            raise ValidationError(f"{kind} predicate {name!r} must have arity 2")
        if kind == "blend" and name not in BLEND_HEADS:
            raise ValidationError(f"blend predicate must be one of {BLEND_HEADS}, got {name!r}")
        preds[name] = PredicateDecl(name, kind, args)
    return Decls(preds)


def load_decls(path) -> Decls:
    from ._toml import load_toml

    data = load_toml(path)
    return make_decls(data.get("predicates", {}))


# ---------------------------------------------------------------- lexer


class _Tok:
    __slots__ = ("kind", "text", "line", "col")

    def __init__(self, kind, text, line, col):
        self.kind, self.text, self.line, self.col = kind, text, line, col


_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>%[^\n]*)
  | (?P<neck>:-)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[(),.])
""", re.VERBOSE)


def _tokenize(text: str):
    toks = []
    pos, line, line_start = 0, 1, 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if m is None:
            raise ProgramSyntaxError(f"unexpected character {text[pos]!r}", line, col,
                                     "identifier, '(', ')', ',', ':-' or '.'")
        kind = m.lastgroup
        chunk = m.group()
        if kind == "ident":
            toks.append(_Tok("ident", chunk, line, col))
        elif kind in ("neck", "punct"):
            toks.append(_Tok(chunk, chunk, line, col))
        newlines = chunk.count("\n")
        if newlines:
            line += newlines
            line_start = pos + chunk.rfind("\n") + 1
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


class _Parser:
    def __init__(self, toks):
        self.toks = toks
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def expect(self, kind, what=None):
        tok = self.peek()
        if tok.kind != kind:
            found = repr(tok.text) if tok.kind != "eof" else "end of input"
            raise ProgramSyntaxError(f"unexpected {found}", tok.line, tok.col, what or repr(kind))
        self.i += 1
        return tok

    def program(self):
        clauses = []
        while self.peek().kind != "eof":
            clauses.append(self.clause())
        return clauses

    def clause(self):
        head = self.atom()
        self.expect(":-", "':-'")
        body = [self.atom()]
        while self.peek().kind == ",":
            self.i += 1
            body.append(self.atom())
        self.expect(".", "',' or '.'")
        return Clause(head, tuple(body))

    def atom(self):
        tok = self.expect("ident", "predicate name")
        if not CONST_RE.match(tok.text):
            raise ProgramSyntaxError(f"bad predicate name {tok.text!r}", tok.line, tok.col,
                                     "lowercase predicate name")
        args = []
        if self.peek().kind == "(":
            self.i += 1
            args.append(self.term())
            while self.peek().kind == ",":
                self.i += 1
                args.append(self.term())
            self.expect(")", "',' or ')'")
        return Atom(tok.text, tuple(args))

    def term(self):
        tok = self.expect("ident", "variable or constant")
        if VAR_RE.match(tok.text):
            return Variable(tok.text)
        if CONST_RE.match(tok.text):
            return Constant(tok.text)
        raise ProgramSyntaxError(f"bad term {tok.text!r}", tok.line, tok.col,
                                 "Variable or lowercase constant")


# ---------------------------------------------------------------- validation


def validate_clause(clause: Clause, decls: Decls, role=None):
    head = clause.head
    if head.predicate not in decls:
        raise ValidationError(f"undeclared predicate {head.predicate!r}", clause)
    hd = decls[head.predicate]
    if hd.kind not in ("action", "blend"):
        raise ValidationError(f"head predicate {head.predicate!r} is {hd.kind}, not action/blend",
                              clause)
    if role == "policy" and hd.kind != "action":
        raise ValidationError("policy clause head must be an action predicate", clause)
    if role == "blend" and hd.kind != "blend":
        raise ValidationError("blending clause head must be neural_agent or logic_agent", clause)
    for atom in (head, *clause.body):
        if atom.predicate not in decls:
            raise ValidationError(f"undeclared predicate {atom.predicate!r}", clause)
        d = decls[atom.predicate]
        if len(atom.args) != d.arity:
            raise ValidationError(
                f"{atom.predicate} expects {d.arity} argument(s), got {len(atom.args)}", clause)
        if atom is not head and d.kind not in STATE_KINDS:
            raise ValidationError(f"body atom {atom} uses {d.kind} predicate", clause)
        if d.kind == "type" and not isinstance(atom.args[1], Constant):
            raise ValidationError(f"type atom {atom} needs a constant type name", clause)
    body_vars = {v for b in clause.body for v in b.variables()}
    for slot, arg in enumerate(head.args):
        if isinstance(arg, Variable) and arg not in body_vars and slot not in hd.global_slots:
            raise ValidationError(f"head variable {arg} does not occur in the body", clause)


def parse_program(text, decls: Decls, role=None) -> LogicProgram:
    """Parse and validate a program.

    ``role`` is ``"policy"``, ``"blend"`` or ``None`` (all heads must then share
    one kind). Raises :class:`ProgramSyntaxError` or :class:`ValidationError`.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            prefix = bytes(text[:exc.start]).decode("utf-8", "replace")
            line = prefix.count("\n") + 1
            col = len(prefix) - (prefix.rfind("\n") + 1) + 1
            raise ProgramSyntaxError("invalid UTF-8", line, col, "UTF-8 text") from None
    clauses = _Parser(_tokenize(text)).program()
    kinds = set()
    for c in clauses:
        validate_clause(c, decls, role)
        kinds.add(decls[c.head.predicate].kind)
    if len(kinds) > 1:
        raise ValidationError("program mixes action and blend heads", clauses[0])
    return LogicProgram(clauses, decls)


def load_program(path, decls: Decls, role=None) -> LogicProgram:
    return parse_program(Path(path).read_bytes(), decls, role)


def pretty_print(program: LogicProgram) -> str:
    """One clause per line; weights are not printed."""
    if not program.clauses:
        return ""
    return "\n".join(str(c) for c in program.clauses) + "\n"


def atoms_of(clauses: Iterable[Clause]):
    for c in clauses:
        yield c.head
        yield from c.body
