"""Hardness-query expressions.

Grammar (keywords are case-insensitive, whitespace is ignored)::

    query      := comparison EOF
    comparison := additive [ ('>' | '>=' | '<' | '<=' | '==') additive ]
    additive   := product { ('+' | '-') product }
    product    := unary { '*' unary }
    unary      := '-' unary | primary
    primary    := NUMBER | term | '(' comparison ')'
    term       := AGG '(' ESET [ ',' 'class' '=' NAME ] ')'
    AGG        := 'total' | 'pixeladj' | 'occaware'
    ESET       := 'fp' | 'fn' | 'false'
    NAME       := identifier | quoted string

Comparisons do not chain: ``a > b > c`` is a syntax error, while
``(a > b) * 2`` is fine. A comparison evaluates to 1.0 or 0.0.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from typing import Mapping, Union

from .matching import ERROR_KINDS, ErrorElement, Matching, error_set
from .model import BoundingBox, ImageRecord

AGGREGATORS = ("total", "pixeladj", "occaware")
COMPARE_OPS = (">", ">=", "<", "<=", "==")


class QuerySyntaxError(ValueError):
    def __init__(self, message: str, position: int, text: str = ""):
        self.position = position
        self.text = text
        pointer = f"\n  {text}\n  {' ' * position}^" if text else ""
        super().__init__(f"{message} at position {position}{pointer}")


class QueryBindError(ValueError):
    """A class filter names a class missing from the dataset schema."""


@dataclass(frozen=True)
class BaseTerm:
    aggregator: str
    error_set: str
    class_name: str | None = None
    class_id: int | None = None


@dataclass(frozen=True)
class Scalar:
    value: float


@dataclass(frozen=True)
class Binary:
    op: str  # '+', '-', '*'
    lhs: "Expr"
    rhs: "Expr"


@dataclass(frozen=True)
class Compare:
    op: str
    lhs: "Expr"
    rhs: "Expr"


Expr = Union[BaseTerm, Scalar, Binary, Compare]


# ---------------------------------------------------------------------------
# tokenizer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<string>"[^"]*"|'[^']*')
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.\-]*)
  | (?P<op>>=|<=|==|[-+*()<>,=])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str  # number, string, ident, op, end
    value: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", pos, text)
        kind = m.lastgroup
        if kind != "ws":
            value = m.group()
            if kind == "string":
                value = value[1:-1]
            tokens.append(_Token(kind, value, pos))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message: str, tok: _Token | None = None):
        tok = tok or self.tok
        return QuerySyntaxError(message, tok.pos, self.text)

    def expect_op(self, value: str) -> _Token:
        if self.tok.kind != "op" or self.tok.value != value:
            found = self.tok.value or "end of input"
            raise self.error(f"expected {value!r}, found {found!r}")
        return self.advance()

    def parse(self) -> Expr:
        expr = self.comparison()
        if self.tok.kind != "end":
            if self.tok.kind == "op" and self.tok.value in COMPARE_OPS:
                raise self.error("chained comparison; parenthesize one side")
            raise self.error(f"unexpected {self.tok.value!r}")
        return expr

    def comparison(self) -> Expr:
        lhs = self.additive()
        if self.tok.kind == "op" and self.tok.value in COMPARE_OPS:
            op = self.advance().value
            rhs = self.additive()
            return Compare(op, lhs, rhs)
        return lhs

    def additive(self) -> Expr:
        expr = self.product()
        while self.tok.kind == "op" and self.tok.value in ("+", "-"):
            op = self.advance().value
            expr = Binary(op, expr, self.product())
        return expr

    def product(self) -> Expr:
        expr = self.unary()
        while self.tok.kind == "op" and self.tok.value == "*":
            self.advance()
            expr = Binary("*", expr, self.unary())
        return expr

    def unary(self) -> Expr:
        if self.tok.kind == "op" and self.tok.value == "-":
            self.advance()
            operand = self.unary()
            if isinstance(operand, Scalar):
                return Scalar(-operand.value)
            return Binary("-", Scalar(0.0), operand)
        return self.primary()

    def primary(self) -> Expr:
        tok = self.tok
        if tok.kind == "number":
            self.advance()
            return Scalar(float(tok.value))
        if tok.kind == "op" and tok.value == "(":
            self.advance()
            expr = self.comparison()
            self.expect_op(")")
            return expr
        if tok.kind == "ident":
            return self.term()
        raise self.error(f"unexpected {tok.value or 'end of input'!r}")

    def term(self) -> BaseTerm:
        name_tok = self.advance()
        agg = name_tok.value.lower()
        if agg not in AGGREGATORS:
            raise self.error(f"unknown aggregator {name_tok.value!r} (expected one of {', '.join(AGGREGATORS)})", name_tok)
        self.expect_op("(")
        eset_tok = self.tok
        if eset_tok.kind != "ident" or eset_tok.value.lower() not in ERROR_KINDS:
            raise self.error(f"unknown error set {eset_tok.value!r} (expected one of {', '.join(ERROR_KINDS)})")
        self.advance()
        class_name = None
        if self.tok.kind == "op" and self.tok.value == ",":
            self.advance()
            kw = self.tok
            if kw.kind != "ident" or kw.value.lower() != "class":
                raise self.error("expected 'class'")
            self.advance()
            self.expect_op("=")
            name = self.tok
            if name.kind not in ("ident", "string") or not name.value:
                raise self.error("expected a class name")
            class_name = self.advance().value
        self.expect_op(")")
        return BaseTerm(agg, eset_tok.value.lower(), class_name)


def parse_query(text: str) -> Expr:
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# printing

_PREC = {"+": 1, "-": 1, "*": 2}
_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_.\-]*\Z")


def _prec(expr: Expr) -> int:
    if isinstance(expr, Compare):
        return 0
    if isinstance(expr, Binary):
        return _PREC[expr.op]
    return 3


def _fmt_number(value: float) -> str:
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def format_query(expr: Expr) -> str:
    """Render an expression so that ``parse_query(format_query(e)) == e``."""
    if isinstance(expr, BaseTerm):
        if expr.class_name is None:
            return f"{expr.aggregator}({expr.error_set})"
        name = expr.class_name
        if not _IDENT_RE.match(name):
            name = f'"{name}"'
        return f"{expr.aggregator}({expr.error_set}, class={name})"
    if isinstance(expr, Scalar):
        return _fmt_number(expr.value)
    if isinstance(expr, Compare):
        lhs, rhs = format_query(expr.lhs), format_query(expr.rhs)
        if isinstance(expr.lhs, Compare):
            lhs = f"({lhs})"
        if isinstance(expr.rhs, Compare):
            rhs = f"({rhs})"
        return f"{lhs} {expr.op} {rhs}"
    p = _prec(expr)
    lhs, rhs = format_query(expr.lhs), format_query(expr.rhs)
    if _prec(expr.lhs) < p:
        lhs = f"({lhs})"
    if _prec(expr.rhs) <= p:
        rhs = f"({rhs})"
    return f"{lhs} {expr.op} {rhs}"


def query_slug(expr: Expr) -> str:
    return re.sub(r"[^a-z0-9]+", "_", format_query(expr).lower()).strip("_") or "query"


def base_terms(expr: Expr) -> list[BaseTerm]:
    if isinstance(expr, BaseTerm):
        return [expr]
    if isinstance(expr, (Binary, Compare)):
        return base_terms(expr.lhs) + base_terms(expr.rhs)
    return []


def bind_query(expr: Expr, categories: Mapping[int, str]) -> Expr:
    """Resolve class filters to class ids; unknown names raise before evaluation."""
    by_name = {name: cid for cid, name in categories.items()}
    by_fold: dict[str, list[int]] = {}
    for cid, name in categories.items():
        by_fold.setdefault(name.casefold(), []).append(cid)

    def resolve(name: str) -> int:
        if name in by_name:
            return by_name[name]
        hits = by_fold.get(name.casefold(), [])
        if len(hits) == 1:
            return hits[0]
        known = ", ".join(sorted(categories.values()))
        raise QueryBindError(f"unknown class {name!r} in query (known classes: {known})")

    def walk(node: Expr) -> Expr:
        if isinstance(node, BaseTerm):
            if node.class_name is None:
                return node
            return replace(node, class_id=resolve(node.class_name))
        if isinstance(node, (Binary, Compare)):
            return replace(node, lhs=walk(node.lhs), rhs=walk(node.rhs))
        return node

    return walk(expr)


# ---------------------------------------------------------------------------
# aggregators


def eval_total(eset) -> float:
    return float(len(eset))


def eval_pixeladj(eset, image: ImageRecord) -> float:
    image_area = image.area
    return math.fsum(e.box.area for e in eset) / image_area


def eval_occaware(eset, tp_boxes: list[BoundingBox]) -> float:
    total = 0.0
    for e in eset:
        area = e.box.area
        if area <= 0:
            continue
        for tb in tp_boxes:
            total += e.box.intersection(tb) / area
    return total


_COMPARE = {
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    "==": lambda a, b: a == b,
}


class QueryContext:
    """Evaluates expressions against one (image, matching) pair, caching base terms."""

    def __init__(self, image: ImageRecord, matching: Matching):
        self.image = image
        self.matching = matching
        self._esets: dict[str, list[ErrorElement]] = {}
        self._terms: dict[tuple, float] = {}
        self._tp_boxes: list[BoundingBox] | None = None

    def error_elements(self, kind: str, class_id: int | None) -> list[ErrorElement]:
        if kind not in self._esets:
            self._esets[kind] = error_set(self.matching, kind)
        elems = self._esets[kind]
        if class_id is None:
            return elems
        return [e for e in elems if e.class_id == class_id]

    def term(self, t: BaseTerm) -> float:
        if t.class_name is not None and t.class_id is None:
            raise QueryBindError(f"class filter {t.class_name!r} is not bound to the dataset schema")
        key = (t.aggregator, t.error_set, t.class_id)
        if key not in self._terms:
            elems = self.error_elements(t.error_set, t.class_id)
            if t.aggregator == "total":
                val = eval_total(elems)
            elif t.aggregator == "pixeladj":
                val = eval_pixeladj(elems, self.image)
            else:
                if self._tp_boxes is None:
                    self._tp_boxes = self.matching.tp_boxes()
                val = eval_occaware(elems, self._tp_boxes)
            self._terms[key] = val
        return self._terms[key]

    def evaluate(self, expr: Expr) -> float:
        if isinstance(expr, BaseTerm):
            return self.term(expr)
        if isinstance(expr, Scalar):
            return expr.value
        if isinstance(expr, Binary):
            a, b = self.evaluate(expr.lhs), self.evaluate(expr.rhs)
            if expr.op == "+":
                return a + b
            if expr.op == "-":
                return a - b
            return a * b
        if isinstance(expr, Compare):
            return 1.0 if _COMPARE[expr.op](self.evaluate(expr.lhs), self.evaluate(expr.rhs)) else 0.0
        raise TypeError(f"not a query expression: {expr!r}")


def eval_query(expr: Expr, image: ImageRecord, matching: Matching) -> float:
    return QueryContext(image, matching).evaluate(expr)


# The nine queries used throughout the experiments: every aggregator on every error set.
DEFAULT_QUERIES: dict[str, str] = {
    f"{agg}_{kind}": f"{agg}({kind})" for agg in AGGREGATORS for kind in ERROR_KINDS
}


def load_query_file(path) -> dict[str, str]:
    """Read ``name = expression`` lines; blank lines and ``#`` comments are skipped."""
    queries: dict[str, str] = {}
    line_re = re.compile(r"^\s*([A-Za-z_][\w\-]*)\s*=(?!=)\s*(.+?)\s*$")
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            m = line_re.match(line)
            if m is None:
                raise ValueError(f"{path}:{lineno}: expected 'name = expression'")
            name, text = m.groups()
            if name in queries:
                raise ValueError(f"{path}:{lineno}: duplicate query name {name!r}")
            try:
                parse_query(text)
            except QuerySyntaxError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            queries[name] = text
    return queries
