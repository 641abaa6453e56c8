"""Examples, vocabularies and the line-record dataset format.

Each dataset line is one JSON object::

    {"src": "how many ...", "mr": "(count $0 ...)"}                 # lambda / code
    {"src": [...], "sql": {"agg": "", "sel": 2, "conds": [[3, ">", "1996"]]},
     "cols": ["Pianist", ...]}                                       # sql

Token fields may be whitespace-separated strings or lists.  Optional fields:
``pos`` (one tag per source token), ``types`` (code token kinds), ``sketch``
(checked against the extractor), ``table_id`` (schema looked up in a tables
file when ``cols`` is absent).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

from .errors import (
    DatasetParseError,
    EmptyDataset,
    NonConformingGold,
    SketchMismatch,
    SketchParseError,
)
from .meaning import SqlQuery, TableSchema, compact_predicates, tokenize_lambda
from .sketch import CODE, LAMBDA, SQL, Sketch, align_sketch, extract, sorted_conditions

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<s>", "</s>"
SPECIALS = (PAD, UNK, BOS, EOS)
#: delimiter placed around header names for the column encoder
COL_SEP = "\u2016"

#: dataset names accepted on the command line
TASKS = {"geo": LAMBDA, "atis": LAMBDA, "django": CODE, "wikisql": SQL,
         LAMBDA: LAMBDA, CODE: CODE, SQL: SQL}


def task_kind(name: str) -> str:
    try:
        return TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; expected one of {sorted(TASKS)}") from None


class Vocab:
    """Token <-> id table; the four specials always take ids 0-3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            if t not in self.stoi:
                self.stoi[t] = len(self.itos)
                self.itos.append(t)

    @classmethod
    def build(cls, seqs: Iterable[Sequence[str]], min_freq: int = 1) -> "Vocab":
        counts = Counter(t for s in seqs for t in s)
        kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
        return cls(kept)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, tok):
        return tok in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, tok: str) -> int:
        return self.stoi.get(tok, 1)

    def ids(self, seq: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, 1) for t in seq]

    def token(self, i: int) -> str:
        return self.itos[i]

    pad, unk, bos, eos = 0, 1, 2, 3


@dataclass
class Example:
    src: tuple[str, ...]
    y: Union[tuple[str, ...], SqlQuery]
    sketch: Sketch
    kind: str
    schema: TableSchema | None = None
    pos: tuple[str, ...] | None = None
    types: tuple[str, ...] | None = None
    table_id: str | None = None
    #: SQL only: (left, right) question span of each condition, in sketch order
    spans: tuple[tuple[int, int], ...] | None = None

    @property
    def target(self) -> list[str]:
        """Output tokens for sequence decoders (lambda / code)."""
        return list(self.y)


def _tokens(value, line, what) -> tuple[str, ...]:
    if isinstance(value, str):
        return tuple(value.split())
    if isinstance(value, list) and all(isinstance(v, str) for v in value):
        return tuple(value)
    raise DatasetParseError(f"field {what!r} must be a string or a list of strings", line)


def lambda_tokens(mr) -> tuple[str, ...]:
    """Compacted model tokens of a logical form given as text or tokens."""
    toks = tokenize_lambda(mr) if isinstance(mr, str) else tokenize_lambda(" ".join(mr))
    return tuple(compact_predicates(toks))


def find_span(src: Sequence[str], value: Sequence[str]) -> tuple[int, int] | None:
    """First occurrence of ``value`` inside ``src`` (case-insensitive)."""
    s = [w.lower() for w in src]
    v = [w.lower() for w in value]
    n = len(v)
    for i in range(len(s) - n + 1):
        if s[i:i + n] == v:
            return (i, i + n - 1)
    return None


def make_example(rec: dict, kind: str, tables: dict | None = None, line: int | None = None) -> Example:
    if not isinstance(rec, dict):
        raise DatasetParseError("record must be an object", line)
    if "src" not in rec:
        raise DatasetParseError("missing field 'src'", line)
    src = _tokens(rec["src"], line, "src")
    if not src:
        raise DatasetParseError("empty source", line)
    pos = _tokens(rec["pos"], line, "pos") if rec.get("pos") is not None else None
    if pos is not None and len(pos) != len(src):
        raise DatasetParseError("'pos' needs one tag per source token", line)
    types = _tokens(rec["types"], line, "types") if rec.get("types") is not None else None
    schema = None
    spans = None
    try:
        if kind == SQL:
            if "sql" not in rec:
                raise DatasetParseError("missing field 'sql'", line)
            y = SqlQuery.from_record(rec["sql"])
            if rec.get("cols") is not None:
                schema = TableSchema.from_headers(rec["cols"])
            elif tables is not None and rec.get("table_id") in tables:
                schema = tables[rec["table_id"]].schema
            else:
                raise DatasetParseError("SQL record needs 'cols' or a known 'table_id'", line)
            y.check(schema)
            sketch = extract(y, SQL)
            found = [find_span(src, c.value) for c in sorted_conditions(y)]
            spans = None if any(f is None for f in found) else tuple(found)
        else:
            if "mr" not in rec:
                raise DatasetParseError("missing field 'mr'", line)
            if kind == LAMBDA:
                y = lambda_tokens(rec["mr"])
            else:
                y = _tokens(rec["mr"], line, "mr")
                if types is not None and len(types) != len(y):
                    raise DatasetParseError("'types' needs one kind per output token", line)
            sketch = extract(list(y), kind, code_kinds=types)
            align_sketch(sketch, list(y), code_kinds=types)
    except DatasetParseError:
        raise
    except (SketchParseError, ValueError, KeyError, TypeError, IndexError) as exc:
        raise DatasetParseError(f"bad meaning representation: {exc}", line) from exc
    if rec.get("sketch") is not None:
        given = _tokens(rec["sketch"], line, "sketch")
        if given != sketch.tokens:
            raise SketchMismatch(f"given sketch {' '.join(given)!r} but extracted {sketch}", line)
    return Example(src, y, sketch, kind, schema, pos, types, rec.get("table_id"), spans)


def _read_jsonl(path):
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            if not raw.strip():
                continue
            try:
                yield lineno, json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(f"invalid JSON: {exc.msg}", lineno) from exc


def load_dataset(path, kind: str, tables: dict | None = None) -> list[Example]:
    kind = task_kind(kind)
    examples = [make_example(rec, kind, tables, lineno) for lineno, rec in _read_jsonl(path)]
    if not examples:
        raise EmptyDataset(f"{path} has no records")
    return examples


def write_dataset(path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(example_record(ex)) + "\n")


def example_record(ex: Example) -> dict:
    rec: dict = {"src": list(ex.src)}
    if ex.kind == SQL:
        rec["sql"] = ex.y.to_record()
        rec["cols"] = ex.schema.headers
    else:
        rec["mr"] = list(ex.y)
    for name in ("pos", "types", "table_id"):
        if getattr(ex, name) is not None:
            rec[name] = list(getattr(ex, name)) if name != "table_id" else ex.table_id
    return rec


def sql_gold_ok(ex: Example) -> bool:
    """Whether every condition value is a span of the question."""
    return ex.kind != SQL or ex.spans is not None


def check_trainable(ex: Example) -> None:
    if not sql_gold_ok(ex):
        raise NonConformingGold("a condition value does not occur in the question")


@dataclass
class Vocabs:
    src: Vocab
    sketch: Vocab
    tgt: Vocab
    pos: Vocab | None = None
    catalog: list[tuple[str, ...]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"src": self.src.itos, "sketch": self.sketch.itos, "tgt": self.tgt.itos,
                "pos": self.pos.itos if self.pos else None,
                "catalog": [list(c) for c in self.catalog]}

    @classmethod
    def from_json(cls, d: dict) -> "Vocabs":
        def mk(itos):
            return Vocab(itos[len(SPECIALS):]) if itos is not None else None

        return cls(mk(d["src"]), mk(d["sketch"]), mk(d["tgt"]), mk(d.get("pos")),
                   [tuple(c) for c in d.get("catalog", [])])


def build_vocabs(examples: Sequence[Example], min_freq: int = 1, tgt_min_freq: int | None = None) -> Vocabs:
    """Vocabularies from training data.  Source words include table headers
    because the question and column encoders share embeddings."""
    if not examples:
        raise EmptyDataset("no examples")
    src_seqs = [ex.src for ex in examples]
    src_seqs += [w for ex in examples if ex.schema for w in ex.schema.columns]
    src = Vocab.build(src_seqs, min_freq)
    if examples[0].kind == SQL and COL_SEP not in src:
        src = Vocab(src.itos[len(SPECIALS):] + [COL_SEP])
    sketch = Vocab.build([ex.sketch.tokens for ex in examples])
    if examples[0].kind == SQL:
        tgt = Vocab()
        catalog = sorted({ex.sketch.tokens for ex in examples})
    else:
        tgt = Vocab.build([ex.y for ex in examples], tgt_min_freq or min_freq)
        catalog = []
    pos = Vocab.build([ex.pos for ex in examples]) if all(ex.pos for ex in examples) else None
    return Vocabs(src, sketch, tgt, pos, catalog)
