"""Meaning representations: bracketed lambda-calculus trees, code token
streams and the SELECT/WHERE subset of SQL.

Lambda-calculus forms travel as whitespace separated token lines.  Inside
the models they use the *compacted* form in which an opening bracket is
glued to the predicate that follows it::

    ( count $0 ( < ( fare $0 ) 50:do ) )   # linearized
    (count $0 (< (fare $0 ) 50:do ) )      # compacted
"""

from __future__ import annotations

import keyword
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence, Union

from .errors import (
    ColumnOutOfRange,
    EmptyExpression,
    EmptySchema,
    SketchParseError,
    SqlSyntaxError,
    UnbalancedBrackets,
    UnclassifiableToken,
)

OPEN, CLOSE = "(", ")"

#: lambda operators and quantifiers whose leading terminal arguments are
#: variable declarations
DEFAULT_BINDERS = frozenset(
    {"lambda", "exists", "count", "argmax", "argmin", "sum", "the", "min", "max"}
)


# ---------------------------------------------------------------------------
# lambda calculus
# ---------------------------------------------------------------------------

Arg = Union["LambdaExpr", str]


@dataclass(frozen=True)
class LambdaExpr:
    pred: str
    args: tuple[Arg, ...] = ()
    is_binder: bool = False
    bound_vars: tuple[str, ...] = ()

    def __post_init__(self):
        if self.bound_vars and not self.is_binder:
            raise ValueError("bound_vars requires a binder node")
        if tuple(self.args[: len(self.bound_vars)]) != self.bound_vars:
            raise ValueError("bound_vars must be the leading arguments")

    @property
    def is_leaf(self) -> bool:
        """True when no argument is itself an expression."""
        return not any(isinstance(a, LambdaExpr) for a in self.args)

    def __str__(self) -> str:
        return " ".join(linearize_lambda(self))


def tokenize_lambda(text: str) -> list[str]:
    """Split a logical form string into tokens, separating brackets."""
    return text.replace(OPEN, " ( ").replace(CLOSE, " ) ").split()


def _as_tokens(tokens: Union[str, Sequence[str]]) -> list[str]:
    if isinstance(tokens, str):
        return tokenize_lambda(tokens)
    return expand_predicates(tokens)


def make_node(pred: str, args: Sequence[Arg], binders=DEFAULT_BINDERS) -> LambdaExpr:
    args = tuple(args)
    is_binder = pred in binders
    bound: list[str] = []
    if is_binder:
        for a in args:
            if isinstance(a, LambdaExpr):
                break
            bound.append(a)
    return LambdaExpr(pred, args, is_binder, tuple(bound))


def parse_lambda(tokens: Union[str, Sequence[str]], binders=DEFAULT_BINDERS) -> LambdaExpr:
    """Parse a bracketed logical form (plain or compacted tokens, or a string)."""
    toks = _as_tokens(tokens)
    if not toks:
        raise EmptyExpression("no tokens")
    depth = 0
    for i, tok in enumerate(toks):
        if tok == OPEN:
            depth += 1
        elif tok == CLOSE:
            depth -= 1
            if depth < 0:
                raise UnbalancedBrackets(f"premature ')' at token {i}")
    if depth != 0:
        raise UnbalancedBrackets(f"{depth} bracket(s) left open")
    if toks[0] != OPEN:
        raise UnbalancedBrackets("expression must start with '('")

    pos = 0

    def node() -> LambdaExpr:
        nonlocal pos
        pos += 1  # consume "("
        if toks[pos] == CLOSE:
            raise EmptyExpression(f"empty brackets at token {pos - 1}")
        if toks[pos] == OPEN:
            raise SketchParseError(f"predicate expected at token {pos}")
        pred = toks[pos]
        pos += 1
        args: list[Arg] = []
        while toks[pos] != CLOSE:
            if toks[pos] == OPEN:
                args.append(node())
            else:
                args.append(toks[pos])
                pos += 1
        pos += 1  # consume ")"
        return make_node(pred, args, binders)

    tree = node()
    if pos != len(toks):
        raise UnbalancedBrackets(f"trailing tokens after position {pos}")
    return tree


def linearize_lambda(expr: LambdaExpr) -> list[str]:
    out: list[str] = []

    def walk(e: LambdaExpr):
        out.append(OPEN)
        out.append(e.pred)
        for a in e.args:
            if isinstance(a, LambdaExpr):
                walk(a)
            else:
                out.append(a)
        out.append(CLOSE)

    walk(expr)
    return out


def _check_balanced(tokens: Sequence[str]) -> None:
    depth = 0
    for i, tok in enumerate(tokens):
        if tok == OPEN:
            depth += 1
        elif tok == CLOSE:
            depth -= 1
            if depth < 0:
                raise UnbalancedBrackets(f"premature ')' at token {i}")
    if depth:
        raise UnbalancedBrackets(f"{depth} bracket(s) left open")


def compact_predicates(tokens: Sequence[str]) -> list[str]:
    """Merge every "(" with the predicate right after it: "( count" -> "(count"."""
    tokens = list(tokens)
    _check_balanced(tokens)
    out: list[str] = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok == OPEN and i + 1 < len(tokens) and tokens[i + 1] not in (OPEN, CLOSE):
            out.append(OPEN + tokens[i + 1])
            i += 2
        else:
            out.append(tok)
            i += 1
    return out


def expand_predicates(tokens: Sequence[str]) -> list[str]:
    """Inverse of :func:`compact_predicates`."""
    out: list[str] = []
    for tok in tokens:
        if len(tok) > 1 and tok.startswith(OPEN):
            out.append(OPEN)
            out.append(tok[1:])
        else:
            out.append(tok)
    return out


def is_opener(tok: str) -> bool:
    return tok.startswith(OPEN)


# ---------------------------------------------------------------------------
# code tokens
# ---------------------------------------------------------------------------


class TokenKind(str, Enum):
    NAME = "NAME"
    NUMBER = "NUMBER"
    STRING = "STRING"
    KEYWORD = "KEYWORD"
    OPERATOR = "OPERATOR"
    DELIMITER = "DELIMITER"

    def __str__(self) -> str:
        return self.value


#: kinds whose surface text is abstracted away in sketches
ABSTRACT_KINDS = (TokenKind.NAME, TokenKind.NUMBER, TokenKind.STRING)

#: builtin functions and types are kept verbatim in sketches, like keywords
BUILTINS = frozenset("""
    abs all any ascii bin bool bytearray bytes callable chr classmethod compile
    complex delattr dict dir divmod enumerate eval exec filter float format
    frozenset getattr globals hasattr hash help hex id input int isinstance
    issubclass iter len list locals map max memoryview min next object oct open
    ord pow print property range repr reversed round set setattr slice sorted
    staticmethod str sum super tuple type vars zip
""".split())
KEYWORDS = frozenset(keyword.kwlist) | BUILTINS
OPERATORS = frozenset(
    "+ - * ** / // % @ << >> & | ^ ~ := < > <= >= == != <>".split()
)
DELIMITERS = frozenset(
    "( ) [ ] { } , : . ; = -> += -= *= /= //= %= @= &= |= ^= >>= <<= **= ` ...".split()
)

_NUMBER_RE = re.compile(
    r"""
    (?: 0[xX](?:_?[0-9a-fA-F])+
      | 0[oO](?:_?[0-7])+
      | 0[bB](?:_?[01])+
      | (?: (?:[0-9](?:_?[0-9])*)?\.[0-9](?:_?[0-9])* | [0-9](?:_?[0-9])*\.? )
        (?:[eE][-+]?[0-9](?:_?[0-9])*)?
    ) [jJlL]?
    """,
    re.VERBOSE,
)
_STRING_PREFIX_RE = re.compile(r"(?i)(?:r|u|b|f|br|rb|fr|rf|ur)?['\"]")


@dataclass(frozen=True)
class CodeToken:
    text: str
    kind: TokenKind


def classify_code_token(text: str) -> CodeToken:
    if text in KEYWORDS:
        kind = TokenKind.KEYWORD
    elif text in OPERATORS:
        kind = TokenKind.OPERATOR
    elif text in DELIMITERS:
        kind = TokenKind.DELIMITER
    elif _STRING_PREFIX_RE.match(text):
        kind = TokenKind.STRING
    elif _NUMBER_RE.fullmatch(text):
        kind = TokenKind.NUMBER
    elif text.isidentifier():
        kind = TokenKind.NAME
    else:
        raise UnclassifiableToken(repr(text))
    return CodeToken(text, kind)


def classify_code(tokens: Iterable[str], kinds: Sequence[str] | None = None) -> list[CodeToken]:
    """Classify a token line; explicit ``kinds`` (from a dataset) take precedence."""
    tokens = list(tokens)
    if kinds is None:
        return [classify_code_token(t) for t in tokens]
    if len(kinds) != len(tokens):
        raise ValueError("token/kind length mismatch")
    return [CodeToken(t, TokenKind(k)) for t, k in zip(tokens, kinds)]


# ---------------------------------------------------------------------------
# SQL subset
# ---------------------------------------------------------------------------

#: WikiSQL index order, so integer-coded records convert directly
AGG_OPS = ("", "MAX", "MIN", "COUNT", "SUM", "AVG")
COND_OPS = ("=", ">", "<")


@dataclass(frozen=True)
class TableSchema:
    columns: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not self.columns:
            raise EmptySchema("schema needs at least one column")
        for col in self.columns:
            if not col:
                raise ValueError("column names need at least one word")

    @classmethod
    def from_headers(cls, headers: Iterable[str]) -> "TableSchema":
        return cls(tuple(tuple(h.split()) for h in headers))

    @property
    def M(self) -> int:
        return len(self.columns)

    def header(self, k: int) -> str:
        return " ".join(self.columns[k])

    @property
    def headers(self) -> list[str]:
        return [self.header(k) for k in range(self.M)]


@dataclass(frozen=True, order=True)
class Condition:
    col: int
    op: str
    value: tuple[str, ...]

    def __post_init__(self):
        if self.op not in COND_OPS:
            raise ValueError(f"unknown condition operator {self.op!r}")


@dataclass(frozen=True)
class SqlQuery:
    agg_op: str
    agg_col: int
    conds: tuple[Condition, ...] = field(default=())

    def __post_init__(self):
        if self.agg_op not in AGG_OPS:
            raise ValueError(f"unknown aggregation operator {self.agg_op!r}")

    def check(self, schema: TableSchema) -> None:
        cols = [self.agg_col] + [c.col for c in self.conds]
        for c in cols:
            if not 0 <= c < schema.M:
                raise ColumnOutOfRange(f"column {c} with M={schema.M}")

    def key(self):
        """Comparison key: conditions compared as a multiset."""
        return (self.agg_op, self.agg_col, tuple(sorted(self.conds)))

    def to_record(self) -> dict:
        return {
            "agg": self.agg_op,
            "sel": self.agg_col,
            "conds": [[c.col, c.op, " ".join(c.value)] for c in self.conds],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SqlQuery":
        agg = rec.get("agg", "")
        if isinstance(agg, int):
            agg = AGG_OPS[agg]
        conds = []
        for col, op, val in rec.get("conds", []):
            if isinstance(op, int):
                op = ("=", ">", "<")[op]
            if not isinstance(val, (list, tuple)):
                val = str(val).split()
            conds.append(Condition(int(col), op, tuple(str(v) for v in val)))
        return cls(agg, int(rec["sel"]), tuple(conds))


def format_sql(q: SqlQuery, schema: TableSchema) -> str:
    q.check(schema)
    col = schema.header(q.agg_col)
    text = f"SELECT {q.agg_op}({col})" if q.agg_op else f"SELECT {col}"
    if q.conds:
        parts = [f"({schema.header(c.col)} {c.op} {' '.join(c.value)})" for c in q.conds]
        text += " WHERE " + " AND ".join(parts)
    return text


def _match_header(text: str, schema: TableSchema) -> list[int]:
    """Columns whose header is a prefix of ``text``, longest first."""
    hits = [k for k in range(schema.M) if text.startswith(schema.header(k))]
    return sorted(hits, key=lambda k: -len(schema.header(k)))


def parse_sql(text: str, schema: TableSchema) -> SqlQuery:
    """Inverse of :func:`format_sql`."""
    text = text.strip()
    if not text.startswith("SELECT "):
        raise SqlSyntaxError("missing SELECT")
    body = text[len("SELECT "):]
    select, _, where = body.partition(" WHERE ")
    agg = ""
    for op in AGG_OPS[1:]:
        if select.startswith(op + "(") and select.endswith(")"):
            agg, select = op, select[len(op) + 1:-1]
            break
    sel = [k for k in range(schema.M) if schema.header(k) == select]
    if not sel:
        raise SqlSyntaxError(f"unknown column {select!r}")
    conds = []
    if where:
        if not (where.startswith("(") and where.endswith(")")):
            raise SqlSyntaxError("conditions must be bracketed")
        for part in where[1:-1].split(") AND ("):
            for k in _match_header(part, schema):
                rest = part[len(schema.header(k)):]
                m = re.match(r" (=|<|>) (.+)$", rest)
                if m:
                    conds.append(Condition(k, m.group(1), tuple(m.group(2).split())))
                    break
            else:
                raise SqlSyntaxError(f"bad condition {part!r}")
    return SqlQuery(agg, sel[0], tuple(conds))
