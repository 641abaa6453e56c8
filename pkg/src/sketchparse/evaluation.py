"""Accuracy metrics, the in-memory SQL executor, and evaluation reports."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from typing import Sequence

from .errors import ColumnOutOfRange, DatasetParseError, EmptySchema, LengthMismatch
from .meaning import SqlQuery, TableSchema
from .sketch import SQL, Sketch, extract_from_prediction


@dataclass
class TableInstance:
    schema: TableSchema
    rows: list[list]

    def __post_init__(self):
        for i, r in enumerate(self.rows):
            if len(r) != self.schema.M:
                raise ValueError(f"row {i} has {len(r)} cells, expected {self.schema.M}")


def load_tables(path) -> dict[str, TableInstance]:
    """Tables file: one JSON object per line with ``id``, ``header``, ``rows``."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                out[rec["id"]] = TableInstance(TableSchema.from_headers(rec["header"]),
                                               [list(r) for r in rec.get("rows", [])])
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                raise DatasetParseError(f"bad table record: {exc}", lineno) from exc
    return out


def _number(x) -> Decimal | None:
    if isinstance(x, bool):
        return None
    if isinstance(x, (int, float)):
        return Decimal(str(x))
    try:
        d = Decimal(str(x).strip())
    except (InvalidOperation, ValueError):
        return None
    return d if d.is_finite() else None


def _text(x) -> str:
    return " ".join(str(x).split()).lower()


def canonical(x) -> str:
    """Numbers as canonical decimal strings, text verbatim."""
    d = _number(x)
    if d is None:
        return str(x)
    d = d.normalize()
    if d == 0:
        return "0"
    s = format(d, "f")
    return s


def _matches(cell, op: str, value: str) -> bool:
    if op == "=":
        a, b = _number(cell), _number(value)
        if a is not None and b is not None:
            return a == b
        return _text(cell) == _text(value)
    a, b = _number(cell), _number(value)
    if a is None or b is None:
        return False
    return a > b if op == ">" else a < b


def execute_sql(q: SqlQuery, table: TableInstance) -> list:
    """Rows passing every condition, projected on the selected column, then
    aggregated.  Plain selection returns the list of cells."""
    if table.schema.M == 0:
        raise EmptySchema("table has no columns")
    q.check(table.schema)
    picked = [row[q.agg_col] for row in table.rows
              if all(_matches(row[c.col], c.op, " ".join(c.value)) for c in q.conds)]
    if q.agg_op == "":
        return picked
    if q.agg_op == "COUNT":
        return [len(picked)]
    nums = [n for n in (_number(v) for v in picked) if n is not None]
    if not nums:
        return []
    if q.agg_op == "MAX":
        return [max(nums)]
    if q.agg_op == "MIN":
        return [min(nums)]
    if q.agg_op == "SUM":
        return [sum(nums)]
    return [sum(nums) / len(nums)]


def results_equal(a: Sequence, b: Sequence) -> bool:
    return Counter(canonical(x) for x in a) == Counter(canonical(x) for x in b)


def _same_length(a, b):
    if len(a) != len(b):
        raise LengthMismatch(f"{len(a)} predictions for {len(b)} gold items")


def _same(p, g) -> bool:
    if p is None:
        return False
    if isinstance(g, SqlQuery):
        return isinstance(p, SqlQuery) and p.key() == g.key()
    return list(p) == list(g)


def exact_match(predictions: Sequence, golds: Sequence) -> float:
    """Fraction of predictions equal to their gold (token sequences, or SQL
    queries compared with conditions as a multiset).  ``None`` is wrong."""
    _same_length(predictions, golds)
    if not golds:
        return 0.0
    return sum(_same(p, g) for p, g in zip(predictions, golds)) / len(golds)


def execution_verdicts(preds: Sequence, golds: Sequence[SqlQuery], tables: Sequence[TableInstance]) -> list[bool]:
    _same_length(preds, golds)
    _same_length(tables, golds)
    out = []
    for p, g, t in zip(preds, golds, tables):
        if p is None:
            out.append(False)
            continue
        try:
            out.append(results_equal(execute_sql(p, t), execute_sql(g, t)))
        except ColumnOutOfRange:
            out.append(False)
    return out


def execution_accuracy(preds: Sequence, golds: Sequence[SqlQuery], tables: Sequence[TableInstance]) -> float:
    v = execution_verdicts(preds, golds, tables)
    return sum(v) / len(v) if v else 0.0


def sketch_accuracy(preds: Sequence, gold_sketches: Sequence[Sketch], kind: str) -> float:
    """Sketches extracted from predicted meaning representations, compared
    with gold sketches; malformed predictions count as wrong."""
    _same_length(preds, gold_sketches)
    if not gold_sketches:
        return 0.0
    hits = 0
    for p, g in zip(preds, gold_sketches):
        s = extract_from_prediction(list(p) if isinstance(p, tuple) else p, kind)
        hits += (not s.is_invalid) and s.tokens == g.tokens
    return hits / len(gold_sketches)


@dataclass
class EvalReport:
    n: int
    exact_match: float
    sketch_accuracy: float
    execution_accuracy: float | None = None
    label: str = ""
    verdicts: list[dict] = field(default_factory=list)

    def summary(self) -> str:
        parts = [f"examples={self.n}", f"exact_match={self.exact_match:.4f}",
                 f"sketch_accuracy={self.sketch_accuracy:.4f}"]
        if self.execution_accuracy is not None:
            parts.append(f"execution_accuracy={self.execution_accuracy:.4f}")
        return (f"[{self.label}] " if self.label else "") + " ".join(parts)

    def to_record(self) -> dict:
        rec = {"label": self.label, "n": self.n, "exact_match": self.exact_match,
               "sketch_accuracy": self.sketch_accuracy}
        if self.execution_accuracy is not None:
            rec["execution_accuracy"] = self.execution_accuracy
        return rec


def evaluate(preds: Sequence, golds: Sequence, gold_sketches: Sequence[Sketch], kind: str,
             tables: Sequence[TableInstance] | None = None, label: str = "") -> EvalReport:
    """Report over aligned predictions (token tuples / SqlQuery / None)."""
    _same_length(preds, golds)
    em = exact_match(preds, golds)
    sk = sketch_accuracy(preds, gold_sketches, kind)
    ex = None
    execv = None
    if kind == SQL and tables is not None:
        execv = execution_verdicts(preds, golds, tables)
        ex = sum(execv) / len(execv) if execv else 0.0
    verdicts = []
    for i, (p, g) in enumerate(zip(preds, golds)):
        v = {"index": i, "exact": _same(p, g)}
        if execv is not None:
            v["execution"] = execv[i]
        verdicts.append(v)
    return EvalReport(len(golds), em, sk, ex, label, verdicts)
