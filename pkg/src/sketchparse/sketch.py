"""Sketch extraction and sketch/output alignment for the three formalisms."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence, Union

from .errors import NonConforming, SketchParseError
from .meaning import (
    ABSTRACT_KINDS,
    CLOSE,
    COND_OPS,
    DEFAULT_BINDERS,
    OPEN,
    CodeToken,
    LambdaExpr,
    SqlQuery,
    classify_code,
    parse_lambda,
)

LAMBDA, CODE, SQL = "lambda", "code", "sql"
KINDS = (LAMBDA, CODE, SQL)

PLACEHOLDER = "?"
NO_WHERE = "<no-where>"
INVALID = "<invalid>"

#: canonical order of condition operators inside SQL sketches
OP_ORDER = (">", "<", "=")
_OP_RANK = {op: i for i, op in enumerate(OP_ORDER)}
assert set(OP_ORDER) == set(COND_OPS)

# slot types used by the fine decoders
ARG = "ARG"
COL = "COL"
SPAN = "SPAN"

_LEAF_RE = re.compile(r"(.+)@(\d+)")
_BINDER_RE = re.compile(r"(.+)#(\d+)")


@dataclass(frozen=True)
class Sketch:
    tokens: tuple[str, ...]
    kind: str

    @property
    def is_invalid(self) -> bool:
        return self.tokens == (INVALID,)

    def __str__(self) -> str:
        return " ".join(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)


def invalid_sketch(kind: str) -> Sketch:
    return Sketch((INVALID,), kind)


@dataclass(frozen=True)
class SketchAlignment:
    """One-to-one links (sketch position, output position) plus the output
    positions realizing each slot of omitted detail."""

    pairs: tuple[tuple[int, int], ...]
    slot_spans: tuple[tuple[int, tuple[int, ...]], ...]

    def spans(self) -> dict[int, tuple[int, ...]]:
        return dict(self.slot_spans)


@dataclass(frozen=True)
class TemplateItem:
    """One output position of a sketch expansion.

    ``token`` is set when the position is fully determined by the sketch;
    ``link`` is the sketch position it is one-to-one aligned with, ``slot``
    the sketch position whose omitted detail it realizes.
    """

    token: str | None = None
    link: int | None = None
    slot: int | None = None
    slot_type: str | None = None

    @property
    def forced(self) -> bool:
        return self.token is not None


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


def sketch_lambda(expr: LambdaExpr) -> Sketch:
    out: list[str] = []

    def walk(t: LambdaExpr):
        if t.is_leaf:
            out.append(f"{t.pred}@{len(t.args)}")
            return
        head, args = t.pred, t.args
        if t.is_binder and t.bound_vars:
            head = f"{t.pred}#{len(t.bound_vars)}"
            args = args[len(t.bound_vars):]
        out.append(OPEN + head)
        for c in args:
            if isinstance(c, LambdaExpr):
                walk(c)
            else:
                out.append(PLACEHOLDER)
        out.append(CLOSE)

    walk(expr)
    return Sketch(tuple(out), LAMBDA)


def sketch_code(tokens: Sequence[CodeToken]) -> Sketch:
    return Sketch(
        tuple(t.kind.value if t.kind in ABSTRACT_KINDS else t.text for t in tokens), CODE
    )


def sorted_conditions(q: SqlQuery):
    """Conditions in sketch order (stable sort on the operator)."""
    return sorted(q.conds, key=lambda c: _OP_RANK[c.op])


def sketch_sql(q: SqlQuery) -> Sketch:
    ops = [c.op for c in sorted_conditions(q)]
    if not ops:
        return Sketch((NO_WHERE,), SQL)
    toks = ["WHERE"]
    for i, op in enumerate(ops):
        if i:
            toks.append("AND")
        toks.append(op)
    return Sketch(tuple(toks), SQL)


def sketch_ops(sketch: Sketch) -> list[str]:
    """Condition operators of a SQL sketch, in order."""
    if sketch.tokens == (NO_WHERE,):
        return []
    toks = sketch.tokens
    if not toks or toks[0] != "WHERE" or len(toks) % 2:
        raise NonConforming(f"malformed SQL sketch {sketch}")
    ops = list(toks[1::2])
    if any(op not in _OP_RANK for op in ops) or any(t != "AND" for t in toks[2::2]):
        raise NonConforming(f"malformed SQL sketch {sketch}")
    return ops


def extract(y, kind: str, *, code_kinds: Sequence[str] | None = None,
            binders=DEFAULT_BINDERS) -> Sketch:
    """Sketch of a gold meaning representation; raises on malformed input."""
    if kind == LAMBDA:
        return sketch_lambda(parse_lambda(y, binders))
    if kind == CODE:
        return sketch_code(classify_code(y, code_kinds))
    if kind == SQL:
        if isinstance(y, dict):
            y = SqlQuery.from_record(y)
        return sketch_sql(y)
    raise ValueError(f"unknown kind {kind!r}")


def extract_from_prediction(y, kind: str) -> Sketch:
    """Like :func:`extract`, but malformed predictions map to the INVALID sketch."""
    if y is None:
        return invalid_sketch(kind)
    try:
        return extract(y, kind)
    except (SketchParseError, ValueError, KeyError, TypeError):
        return invalid_sketch(kind)


# ---------------------------------------------------------------------------
# templates and alignment
# ---------------------------------------------------------------------------


def parse_lambda_sketch_token(tok: str):
    """Classify a lambda sketch token.

    Returns one of ("open", pred, k), ("close",), ("hole",), ("leaf", pred, k).
    """
    if tok == CLOSE:
        return ("close",)
    if tok == PLACEHOLDER:
        return ("hole",)
    if len(tok) > 1 and tok.startswith(OPEN):
        m = _BINDER_RE.fullmatch(tok[1:])
        if m:
            return ("open", m.group(1), int(m.group(2)))
        return ("open", tok[1:], 0)
    m = _LEAF_RE.fullmatch(tok)
    if m:
        return ("leaf", m.group(1), int(m.group(2)))
    raise NonConforming(f"not a lambda sketch token: {tok!r}")


def expand_template(sketch: Sketch) -> list[TemplateItem]:
    """Output positions implied by a sketch, forced tokens and typed slots."""
    items: list[TemplateItem] = []
    if sketch.is_invalid:
        raise NonConforming("cannot expand the INVALID sketch")
    if sketch.kind == LAMBDA:
        depth = 0
        for i, tok in enumerate(sketch.tokens):
            cls = parse_lambda_sketch_token(tok)
            if cls[0] == "open":
                depth += 1
                items.append(TemplateItem(OPEN + cls[1], link=i))
                items += [TemplateItem(slot=i, slot_type=ARG)] * cls[2]
            elif cls[0] == "close":
                depth -= 1
                if depth < 0:
                    raise NonConforming("unbalanced sketch")
                items.append(TemplateItem(CLOSE, link=i))
            elif cls[0] == "hole":
                items.append(TemplateItem(slot=i, slot_type=ARG))
            else:
                items.append(TemplateItem(OPEN + cls[1], link=i))
                items += [TemplateItem(slot=i, slot_type=ARG)] * cls[2]
                items.append(TemplateItem(CLOSE, slot=i))
        if depth:
            raise NonConforming("unbalanced sketch")
    elif sketch.kind == CODE:
        kinds = {k.value for k in ABSTRACT_KINDS}
        for i, tok in enumerate(sketch.tokens):
            if tok in kinds:
                items.append(TemplateItem(slot=i, slot_type=tok))
            else:
                items.append(TemplateItem(tok, link=i))
    elif sketch.kind == SQL:
        ops = sketch_ops(sketch)
        if ops:
            items.append(TemplateItem("WHERE", link=0))
            for j, op in enumerate(ops):
                if j:
                    items.append(TemplateItem("AND", link=2 * j))
                k = 2 * j + 1
                items.append(TemplateItem(op, link=k))
                items.append(TemplateItem(slot=k, slot_type=COL))
                items.append(TemplateItem(slot=k, slot_type=SPAN))
    else:
        raise ValueError(f"unknown kind {sketch.kind!r}")
    return items


def where_sequence(q: SqlQuery) -> list[str]:
    """Linear form of a WHERE clause in sketch order; columns and values
    occupy one position each."""
    out: list[str] = []
    for j, c in enumerate(sorted_conditions(q)):
        out += (["AND"] if j else ["WHERE"]) + [c.op, f"col:{c.col}", "val:" + " ".join(c.value)]
    return out


def align_sketch(sketch: Sketch, y, *, code_kinds: Sequence[str] | None = None) -> SketchAlignment:
    """Link sketch positions to the positions of ``y`` they determine."""
    try:
        own = extract(y, sketch.kind, code_kinds=code_kinds)
    except (SketchParseError, ValueError) as exc:
        raise NonConforming(str(exc)) from exc
    if own.tokens != sketch.tokens:
        raise NonConforming(f"output has sketch {own}, expected {sketch}")
    seq = where_sequence(y if isinstance(y, SqlQuery) else SqlQuery.from_record(y)) \
        if sketch.kind == SQL else list(y)
    template = expand_template(sketch)
    if len(template) != len(seq):
        raise NonConforming("template length differs from output length")
    pairs = []
    spans: dict[int, list[int]] = {}
    for t, (item, tok) in enumerate(zip(template, seq)):
        if item.forced and item.token != tok:
            raise NonConforming(f"position {t}: expected {item.token!r}, got {tok!r}")
        if item.link is not None:
            pairs.append((item.link, t))
        else:
            spans.setdefault(item.slot, []).append(t)
    return SketchAlignment(tuple(pairs), tuple((k, tuple(v)) for k, v in sorted(spans.items())))


def fill_template(template: Sequence[TemplateItem], fillers: Sequence[str]) -> list[str]:
    """Replace slots in a lambda/code template by ``fillers`` in order."""
    it = iter(fillers)
    out = [item.token if item.forced else next(it) for item in template]
    if next(it, None) is not None:
        raise ValueError("too many fillers")
    return out


def parent_positions(tokens: Sequence[str]) -> list[int]:
    """For output step t (1-based), the step that opened the innermost open
    bracket before it; 0 stands for the initial decoder state."""
    stack: list[int] = []
    parents = []
    for t, tok in enumerate(tokens, start=1):
        parents.append(stack[-1] if stack else 0)
        if len(tok) > 1 and tok.startswith(OPEN):
            stack.append(t)
        elif tok == CLOSE and stack:
            stack.pop()
    return parents


Prediction = Union[list, SqlQuery, None]
