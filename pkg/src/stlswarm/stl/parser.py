"""Textual spec language.

Grammar (whitespace insignificant)::

    formula := term (('&' | '|' | '->') term)*
    term    := '!'? atom
    atom    := primary ('U' '[' INT ',' INT ']' primary)*
    primary := IDENT | '(' formula ')' | ('F' | 'G') '[' INT ',' INT ']' '(' formula ')'

Binary connectives use the usual precedence: ``&`` binds tighter than ``|``,
which binds tighter than ``->`` (right associative). ``U`` is left
associative. Identifiers resolve against a region table.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping

from .formula import (
    And,
    BoundError,
    Eventually,
    Formula,
    Globally,
    Implies,
    Not,
    Or,
    Predicate,
    PredicateFn,
    Until,
)


class SpecSyntaxError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} at line {line}, column {column}")
        self.line = line
        self.column = column


_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<arrow>->)
  | (?P<int>\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[&|!()\[\],])
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks, i = [], 0
    while i < len(text):
        m = _TOKEN.match(text, i)
        if m is None:
            line, col = _line_col(text, i)
            raise SpecSyntaxError(f"unexpected character {text[i]!r}", line, col)
        kind = m.lastgroup
        if kind != "ws":
            toks.append(_Tok(kind, m.group(), i))
        i = m.end()
    toks.append(_Tok("eof", "", len(text)))
    return toks


def _line_col(text: str, pos: int) -> tuple[int, int]:
    line = text.count("\n", 0, pos) + 1
    col = pos - (text.rfind("\n", 0, pos) + 1) + 1
    return line, col


class _Parser:
    def __init__(self, text: str, regions: Mapping[str, PredicateFn]):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0
        self.regions = regions

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def error(self, msg: str, tok: _Tok | None = None):
        line, col = _line_col(self.text, (tok or self.tok).pos)
        raise SpecSyntaxError(msg, line, col)

    def accept(self, text: str) -> bool:
        if self.tok.text == text and self.tok.kind != "eof":
            self.i += 1
            return True
        return False

    def expect(self, text: str) -> None:
        if not self.accept(text):
            found = self.tok.text or "end of input"
            self.error(f"expected {text!r}, found {found!r}")

    def integer(self) -> int:
        if self.tok.kind != "int":
            self.error(f"expected integer, found {self.tok.text!r}")
        v = int(self.tok.text)
        self.i += 1
        return v

    def interval(self) -> tuple[int, int]:
        start = self.tok
        self.expect("[")
        a = self.integer()
        self.expect(",")
        b = self.integer()
        self.expect("]")
        if a > b:
            line, col = _line_col(self.text, start.pos)
            raise BoundError(f"temporal bound a>b: [{a},{b}] at line {line}, column {col}")
        return a, b

    def parse(self) -> Formula:
        f = self.implication()
        if self.tok.kind != "eof":
            self.error(f"unexpected {self.tok.text!r}")
        return f

    def implication(self) -> Formula:
        lhs = self.disjunction()
        if self.accept("->"):
            return Implies(lhs, self.implication())
        return lhs

    def disjunction(self) -> Formula:
        parts = [self.conjunction()]
        while self.accept("|"):
            parts.append(self.conjunction())
        return parts[0] if len(parts) == 1 else Or(tuple(parts))

    def conjunction(self) -> Formula:
        parts = [self.term()]
        while self.accept("&"):
            parts.append(self.term())
        return parts[0] if len(parts) == 1 else And(tuple(parts))

    def term(self) -> Formula:
        if self.accept("!"):
            return Not(self.atom())
        return self.atom()

    def atom(self) -> Formula:
        lhs = self.primary()
        while self.tok.text == "U" and self.toks[self.i + 1].text == "[":
            self.i += 1
            a, b = self.interval()
            lhs = Until(a, b, lhs, self.primary())
        return lhs

    def primary(self) -> Formula:
        tok = self.tok
        if self.accept("("):
            f = self.implication()
            self.expect(")")
            return f
        if tok.text in ("F", "G") and self.toks[self.i + 1].text == "[":
            self.i += 1
            a, b = self.interval()
            self.expect("(")
            body = self.implication()
            self.expect(")")
            return Eventually(a, b, body) if tok.text == "F" else Globally(a, b, body)
        if tok.kind == "ident":
            if tok.text not in self.regions:
                self.error(f"unknown region {tok.text!r}")
            self.i += 1
            return Predicate(self.regions[tok.text])
        self.error(f"unexpected {tok.text or 'end of input'!r}")


def parse_spec(text: str, regions: Mapping[str, PredicateFn]) -> Formula:
    """Parse spec-language ``text`` into a formula.

    Raises :class:`SpecSyntaxError` (with line/column) or :class:`BoundError`.
    """
    return _Parser(text, regions).parse()


def to_text(f: Formula) -> str:
    """Render ``f`` in the spec language; ``parse_spec`` inverts this."""
    if isinstance(f, Predicate):
        if not f.fn.name:
            raise ValueError("cannot print an anonymous predicate")
        return f.fn.name
    if isinstance(f, Not):
        return "!" + _wrap(f.f)
    if isinstance(f, And):
        return " & ".join(_wrap(c) for c in f.fs)
    if isinstance(f, Or):
        return " | ".join(_wrap(c) for c in f.fs)
    if isinstance(f, Implies):
        return f"{_wrap(f.f)} -> {_wrap(f.g)}"
    if isinstance(f, Eventually):
        return f"F[{f.a},{f.b}]({to_text(f.f)})"
    if isinstance(f, Globally):
        return f"G[{f.a},{f.b}]({to_text(f.f)})"
    if isinstance(f, Until):
        return f"{_wrap(f.f)} U[{f.a},{f.b}] {_wrap(f.g)}"
    raise TypeError(type(f).__name__)


def _wrap(f: Formula) -> str:
    s = to_text(f)
    if isinstance(f, (Predicate, Eventually, Globally)):
        return s
    return f"({s})"
