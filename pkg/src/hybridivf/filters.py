"""Attribute filters: expression tree, text parser, evaluators, and attribute codebooks.

Grammar (keywords are case-insensitive)::

    expr  := or
    or    := and ('OR' and)*
    and   := unary ('AND' unary)*
    unary := 'NOT' unary | '(' expr ')' | pred
    pred  := 'a'<digits> ( op int
                         | 'BETWEEN' int 'AND' int
                         | 'IN' '(' int (',' int)* ')' )
    op    := '=' | '!=' | '<' | '<=' | '>' | '>='
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .core import ATTR_DTYPE, UsageError

MAX_DEPTH = 64
INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1


class FilterError(UsageError):
    pass


class FilterSyntaxError(FilterError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class FilterValidationError(FilterError):
    pass


class Op(str, enum.Enum):
    EQ = "="
    NE = "!="
    LT = "<"
    LE = "<="
    GT = ">"
    GE = ">="
    BETWEEN = "BETWEEN"
    IN = "IN"


@dataclass(frozen=True)
class Predicate:
    attr: int
    op: Op
    operands: tuple[int, ...]

    def __post_init__(self):
        if self.attr < 0:
            raise FilterValidationError(f"attribute index must be >= 0, got {self.attr}")
        if self.op is Op.BETWEEN:
            if len(self.operands) != 2:
                raise FilterValidationError("BETWEEN takes exactly two operands")
            if self.operands[0] > self.operands[1]:
                raise FilterValidationError(
                    f"BETWEEN requires lo <= hi, got {self.operands[0]} > {self.operands[1]}"
                )
        elif self.op is Op.IN:
            if not self.operands:
                raise FilterValidationError("IN list must be non-empty")
        elif len(self.operands) != 1:
            raise FilterValidationError(f"{self.op.value} takes exactly one operand")
        for v in self.operands:
            if not INT64_MIN <= v <= INT64_MAX:
                raise FilterValidationError(f"operand {v} does not fit in a signed 64-bit integer")


class _Junction:
    """N-ary boolean node; ``And(p, q, r)`` keeps chains shallow."""

    __slots__ = ("children",)
    word = ""

    def __init__(self, *children: "FilterExpr"):
        if len(children) < 2:
            raise FilterValidationError(f"{self.word} needs at least two operands")
        object.__setattr__(self, "children", tuple(children))

    def __setattr__(self, name, value):
        raise AttributeError(f"{type(self).__name__} is immutable")

    def __eq__(self, other) -> bool:
        return type(self) is type(other) and self.children == other.children

    def __hash__(self) -> int:
        return hash((self.word, self.children))

    def __repr__(self) -> str:
        return f"{type(self).__name__}({', '.join(map(repr, self.children))})"


class And(_Junction):
    __slots__ = ()
    word = "AND"


class Or(_Junction):
    __slots__ = ()
    word = "OR"


@dataclass(frozen=True)
class Not:
    child: "FilterExpr"


FilterExpr = Union[Predicate, And, Or, Not]


# -- parsing -----------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<attr>[aA]\d+)(?![A-Za-z0-9_])
  | (?P<float>[-+]?\d*\.\d+(?:[eE][-+]?\d+)?|[-+]?\d+[eE][-+]?\d+)
  | (?P<int>[-+]?\d+)(?![A-Za-z0-9_])
  | (?P<kw>(?i:AND|OR|NOT|BETWEEN|IN))(?![A-Za-z0-9_])
  | (?P<op><=|>=|!=|=|<|>)
  | (?P<lparen>\()
  | (?P<rparen>\))
  | (?P<comma>,)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise FilterSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            value = m.group()
            if kind == "kw":
                value = value.upper()
            tokens.append(_Token(kind, value, pos))
        pos = m.end()
    tokens.append(_Token("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.depth = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def next(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def is_kw(self, word: str) -> bool:
        tok = self.peek()
        return tok.kind == "kw" and tok.text == word

    def expect(self, kind: str, what: str, text: str | None = None) -> _Token:
        tok = self.peek()
        if tok.kind != kind or (text is not None and tok.text != text):
            found = "end of input" if tok.kind == "eof" else repr(tok.text)
            raise FilterSyntaxError(f"expected {what}, found {found}", tok.offset)
        return self.next()

    def enter(self, offset: int) -> None:
        self.depth += 1
        if self.depth > MAX_DEPTH:
            raise FilterSyntaxError(f"expression nested deeper than {MAX_DEPTH}", offset)

    def parse(self) -> FilterExpr:
        expr = self.parse_or()
        tok = self.peek()
        if tok.kind != "eof":
            raise FilterSyntaxError(f"unexpected {tok.text!r}", tok.offset)
        return expr

    def parse_or(self) -> FilterExpr:
        terms = [self.parse_and()]
        while self.is_kw("OR"):
            self.next()
            terms.append(self.parse_and())
        return terms[0] if len(terms) == 1 else Or(*terms)

    def parse_and(self) -> FilterExpr:
        terms = [self.parse_unary()]
        while self.is_kw("AND"):
            self.next()
            terms.append(self.parse_unary())
        return terms[0] if len(terms) == 1 else And(*terms)

    def parse_unary(self) -> FilterExpr:
        tok = self.peek()
        self.enter(tok.offset)
        try:
            if self.is_kw("NOT"):
                self.next()
                return Not(self.parse_unary())
            if tok.kind == "lparen":
                self.next()
                inner = self.parse_or()
                self.expect("rparen", "')'")
                return inner
            return self.parse_pred()
        finally:
            self.depth -= 1

    def parse_int(self) -> int:
        return int(self.expect("int", "integer").text)

    def parse_pred(self) -> Predicate:
        tok = self.expect("attr", "attribute reference like 'a0'")
        attr = int(tok.text[1:])
        nxt = self.peek()
        try:
            if nxt.kind == "op":
                self.next()
                return Predicate(attr, Op(nxt.text), (self.parse_int(),))
            if self.is_kw("BETWEEN"):
                self.next()
                lo = self.parse_int()
                self.expect("kw", "'AND'", "AND")
                hi = self.parse_int()
                return Predicate(attr, Op.BETWEEN, (lo, hi))
            if self.is_kw("IN"):
                self.next()
                self.expect("lparen", "'('")
                values = [self.parse_int()]
                while self.peek().kind == "comma":
                    self.next()
                    values.append(self.parse_int())
                self.expect("rparen", "')'")
                return Predicate(attr, Op.IN, tuple(values))
        except FilterValidationError as exc:
            raise FilterValidationError(f"{exc} (predicate at offset {tok.offset})") from None
        found = "end of input" if nxt.kind == "eof" else repr(nxt.text)
        raise FilterSyntaxError(f"expected operator, BETWEEN or IN, found {found}", nxt.offset)


def parse_filter(text: str, n_attrs: int | None = None) -> FilterExpr:
    """Parse filter text; ``n_attrs`` bounds the attribute indices when given."""
    if not text or not text.strip():
        raise FilterSyntaxError("empty filter expression", 0)
    expr = _Parser(text).parse()
    if n_attrs is not None:
        validate(expr, n_attrs)
    return expr


def to_text(f: FilterExpr) -> str:
    """Render ``f`` as fully parenthesized filter text that reparses to the same tree."""
    if isinstance(f, Predicate):
        name = f"a{f.attr}"
        if f.op is Op.BETWEEN:
            return f"{name} BETWEEN {f.operands[0]} AND {f.operands[1]}"
        if f.op is Op.IN:
            return f"{name} IN ({', '.join(str(v) for v in f.operands)})"
        return f"{name} {f.op.value} {f.operands[0]}"
    if isinstance(f, Not):
        return f"NOT ({to_text(f.child)})"
    return f" {f.word} ".join(f"({to_text(c)})" for c in f.children)


def max_attr(f: FilterExpr) -> int:
    if isinstance(f, Predicate):
        return f.attr
    if isinstance(f, Not):
        return max_attr(f.child)
    return max(max_attr(c) for c in f.children)


def depth(f: FilterExpr) -> int:
    if isinstance(f, Predicate):
        return 1
    if isinstance(f, Not):
        return 1 + depth(f.child)
    return 1 + max(depth(c) for c in f.children)


def validate(f: FilterExpr | None, n_attrs: int) -> None:
    """Check a programmatically built tree against an index with ``n_attrs`` attributes."""
    if f is None:
        return
    if max_attr(f) >= n_attrs:
        raise FilterValidationError(
            f"attribute a{max_attr(f)} out of range: index has {n_attrs} attributes"
        )
    if depth(f) > MAX_DEPTH:
        raise FilterValidationError(f"expression nested deeper than {MAX_DEPTH}")


# -- evaluation --------------------------------------------------------------

def _eval_pred(p: Predicate, value: int) -> bool:
    op, args = p.op, p.operands
    if op is Op.EQ:
        return value == args[0]
    if op is Op.NE:
        return value != args[0]
    if op is Op.LT:
        return value < args[0]
    if op is Op.LE:
        return value <= args[0]
    if op is Op.GT:
        return value > args[0]
    if op is Op.GE:
        return value >= args[0]
    if op is Op.BETWEEN:
        return args[0] <= value <= args[1]
    return value in args


def eval_filter(f: FilterExpr | None, attrs: Sequence[int]) -> bool:
    """Evaluate ``f`` against one attribute vector. ``None`` accepts everything."""
    if f is None:
        return True
    if isinstance(f, Predicate):
        return _eval_pred(f, int(attrs[f.attr]))
    if isinstance(f, And):
        return all(eval_filter(c, attrs) for c in f.children)
    if isinstance(f, Or):
        return any(eval_filter(c, attrs) for c in f.children)
    return not eval_filter(f.child, attrs)


def _pred_mask(p: Predicate, col: np.ndarray) -> np.ndarray:
    op, args = p.op, p.operands
    if op is Op.EQ:
        return col == args[0]
    if op is Op.NE:
        return col != args[0]
    if op is Op.LT:
        return col < args[0]
    if op is Op.LE:
        return col <= args[0]
    if op is Op.GT:
        return col > args[0]
    if op is Op.GE:
        return col >= args[0]
    if op is Op.BETWEEN:
        return (col >= args[0]) & (col <= args[1])
    return np.isin(col, np.asarray(args, dtype=ATTR_DTYPE))


def eval_filter_block(f: FilterExpr | None, block) -> np.ndarray:
    """Boolean mask over the rows of an ``n x M`` attribute block, one column pass per leaf."""
    block = np.asarray(block, dtype=ATTR_DTYPE)
    if block.ndim != 2:
        raise UsageError(f"attribute block must be 2-D, got shape {block.shape}")
    n = block.shape[0]
    if f is None:
        return np.ones(n, dtype=bool)
    if isinstance(f, Predicate):
        return _pred_mask(f, block[:, f.attr])
    if isinstance(f, And):
        mask = eval_filter_block(f.children[0], block)
        for c in f.children[1:]:
            mask &= eval_filter_block(c, block)
        return mask
    if isinstance(f, Or):
        mask = eval_filter_block(f.children[0], block)
        for c in f.children[1:]:
            mask |= eval_filter_block(c, block)
        return mask
    return ~eval_filter_block(f.child, block)


# -- attribute encoding -------------------------------------------------------

@dataclass(frozen=True)
class CategoricalAttribute:
    name: str
    codes: dict

    def __post_init__(self):
        if sorted(self.codes.values()) != list(range(len(self.codes))):
            raise UsageError(f"attribute {self.name!r}: dictionary codes must be dense from 0")

    @classmethod
    def from_values(cls, name: str, values) -> "CategoricalAttribute":
        codes: dict = {}
        for v in values:
            codes.setdefault(str(v), len(codes))
        return cls(name, codes)

    def encode(self, value) -> int:
        try:
            return self.codes[str(value)]
        except KeyError:
            raise UsageError(f"attribute {self.name!r}: unknown category {value!r}") from None


@dataclass(frozen=True)
class BinnedAttribute:
    """Numeric attribute mapped to the index of its containing bin.

    ``edges`` delimit ``len(edges) - 1`` half-open bins (at least one);
    values outside the edges are clamped into the first or last bin.
    """

    name: str
    edges: tuple[float, ...]

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.float64)
        if e.size < 1 or not np.all(np.isfinite(e)) or np.any(np.diff(e) <= 0):
            raise UsageError(f"attribute {self.name!r}: bin edges must be finite and strictly increasing")

    @classmethod
    def from_quantiles(cls, name: str, values, n_bins: int) -> "BinnedAttribute":
        return cls(name, quantile_edges(values, n_bins))

    @property
    def n_bins(self) -> int:
        return max(1, len(self.edges) - 1)

    def encode(self, value) -> int:
        v = float(value)
        if not np.isfinite(v):
            raise UsageError(f"attribute {self.name!r}: non-finite value {value!r}")
        idx = int(np.searchsorted(self.edges, v, side="right")) - 1
        return min(max(idx, 0), self.n_bins - 1)


@dataclass(frozen=True)
class IntegerAttribute:
    """Attribute already supplied as a signed 64-bit integer; stored verbatim."""

    name: str

    def encode(self, value) -> int:
        if isinstance(value, float) and not value.is_integer():
            raise UsageError(f"attribute {self.name!r}: expected an integer, got {value!r}")
        v = int(value)
        if not INT64_MIN <= v <= INT64_MAX:
            raise UsageError(f"attribute {self.name!r}: {v} does not fit in 64 bits")
        return v


Attribute = Union[CategoricalAttribute, BinnedAttribute, IntegerAttribute]


def quantile_edges(values, n_bins: int) -> tuple[float, ...]:
    """Edges putting roughly equal sample counts in each of ``n_bins`` bins."""
    if n_bins < 1:
        raise UsageError("n_bins must be >= 1")
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise UsageError("cannot bin an empty sample")
    edges = np.unique(np.quantile(v, np.linspace(0.0, 1.0, n_bins + 1)))
    return tuple(float(e) for e in edges)


class AttributeCodebook:
    """Per-attribute encoders, persisted as ``codebook.json`` next to the index."""

    def __init__(self, attributes: Sequence[Attribute]):
        self.attributes = list(attributes)
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise UsageError("attribute names must be unique")

    @classmethod
    def integers(cls, n_attrs: int) -> "AttributeCodebook":
        return cls([IntegerAttribute(f"a{i}") for i in range(n_attrs)])

    def __len__(self) -> int:
        return len(self.attributes)

    def encode(self, raw: Sequence) -> np.ndarray:
        if len(raw) != len(self.attributes):
            raise UsageError(f"expected {len(self.attributes)} attribute values, got {len(raw)}")
        return np.array([a.encode(v) for a, v in zip(self.attributes, raw)], dtype=ATTR_DTYPE)

    def to_json(self) -> dict:
        out = []
        for a in self.attributes:
            if isinstance(a, CategoricalAttribute):
                out.append({"name": a.name, "kind": "categorical", "dictionary": dict(a.codes)})
            elif isinstance(a, BinnedAttribute):
                out.append({"name": a.name, "kind": "numeric", "edges": list(a.edges)})
            else:
                out.append({"name": a.name, "kind": "integer"})
        return {"attributes": out}

    @classmethod
    def from_json(cls, doc: dict) -> "AttributeCodebook":
        attrs: list[Attribute] = []
        for entry in doc["attributes"]:
            kind = entry["kind"]
            if kind == "categorical":
                attrs.append(CategoricalAttribute(entry["name"], dict(entry["dictionary"])))
            elif kind == "numeric":
                attrs.append(BinnedAttribute(entry["name"], tuple(entry["edges"])))
            elif kind == "integer":
                attrs.append(IntegerAttribute(entry["name"]))
            else:
                raise UsageError(f"unknown attribute kind {kind!r} in codebook")
        return cls(attrs)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "AttributeCodebook":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def encode_attributes(raw: Sequence, cb: AttributeCodebook) -> np.ndarray:
    return cb.encode(raw)
