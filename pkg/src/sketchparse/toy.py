"""Small generated corpora for smoke tests and the acceptance suite.

* lambda: geography questions from a handful of templates over eight states;
* code: one-line Python statements where many identifiers and numbers are
  unique to their example (so they fall outside a frequency-2 vocabulary);
* sql: questions over randomly generated tables.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .data import Example, make_example
from .meaning import AGG_OPS, Condition, SqlQuery, TableSchema
from .sketch import CODE, LAMBDA, SQL

STATES = ["texas", "ohio", "utah", "iowa", "maine", "idaho", "nevada", "oregon"]

GEO_TEMPLATES = [
    ("what states border {s}", "(lambda $0 e (and (state:t $0) (next_to:t $0 {c})))"),
    ("how many rivers are in {s}", "(count $0 (and (river:t $0) (loc:t $0 {c})))"),
    ("what is the capital of {s}", "(lambda $0 e (capital:t {c} $0))"),
    ("which cities are in {s}", "(lambda $0 e (and (city:t $0) (loc:t $0 {c})))"),
    ("what is the largest city in {s}", "(argmax $0 (and (city:t $0) (loc:t $0 {c})) (size:t $0))"),
    ("how many people live in {s}", "(population:i {c})"),
    ("what is the highest point in {s}", "(argmax $0 (and (place:t $0) (loc:t $0 {c})) (elevation:i $0))"),
    ("what rivers do not run through {s}",
     "(lambda $0 e (and (river:t $0) (not (loc:t $0 {c}))))"),
]


def lambda_corpus(seed: int = 0) -> list[Example]:
    """64 question / logical-form pairs (8 templates x 8 states)."""
    out = []
    for s in STATES:
        for nl, mr in GEO_TEMPLATES:
            out.append(make_example({"src": nl.format(s=s), "mr": mr.format(c=f"{s}:s")}, LAMBDA))
    random.Random(seed).shuffle(out)
    return out


# ---------------------------------------------------------------------------

COMMON_NAMES = ["self", "value", "data", "result", "key", "name", "items", "path"]
SYLLABLES = ["ka", "lo", "mi", "ru", "ze", "po", "ta", "vi", "no", "su", "be", "da"]

CODE_TEMPLATES = [
    ("call the function {a} with argument {b}", "{a} ( {b} )"),
    ("if {a} is greater than {n} , return {b}", "if {a} > {n} : return {b}"),
    ("substitute {n} for {a}", "{a} = {n}"),
    ("for every {a} in {b} , call the function {c} with argument {a}", "for {a} in {b} : {c} ( {a} )"),
    ("{a} is an empty list", "{a} = [ ]"),
    ("return the length of {a}", "return len ( {a} )"),
    ("append {b} to {a}", "{a} . append ( {b} )"),
    ("call the method {b} on {a} with {s}", "{a} . {b} ( {s} )"),
]


def _rare_name(rng: random.Random) -> str:
    return "".join(rng.choice(SYLLABLES) for _ in range(3)) + "_" + rng.choice(["x", "id", "fn", "obj"])


def code_corpus(n: int = 60, seed: int = 0, rare: float = 0.5) -> list[Example]:
    """``n`` description / code pairs; each identifier slot draws a unique
    name with probability ``rare``."""
    rng = random.Random(seed)
    out = []
    used: set[str] = set()
    for i in range(n):
        nl, code = CODE_TEMPLATES[i % len(CODE_TEMPLATES)]
        names = []
        while len(names) < 3:
            if rng.random() < rare:
                w = _rare_name(rng)
                if w in used:
                    continue
                used.add(w)
            else:
                w = rng.choice(COMMON_NAMES)
            if w not in names:
                names.append(w)
        num = str(rng.choice([0, 1, 2, 10]) if rng.random() < 0.5 else rng.randint(11, 999))
        s = rng.choice(["'utf-8'", "'%s'", "'ascii'"])
        fill = dict(a=names[0], b=names[1], c=names[2], n=num, s=s)
        out.append(make_example({"src": nl.format(**fill), "mr": code.format(**fill)}, CODE))
    return out


# ---------------------------------------------------------------------------

HEADER_WORDS = ["player", "team", "year", "score", "city", "round", "pick", "points",
                "country", "position", "school", "season", "games", "rank", "club", "coach"]
FIRST = ["mikhail", "anna", "john", "maria", "li", "omar", "sara", "ivan", "lucas", "emma"]
LAST = ["snitko", "smith", "garcia", "chen", "kovac", "haddad", "berg", "novak"]
PLACES = ["paris", "lima", "oslo", "cairo", "delhi", "quito", "rome", "tokyo", "accra"]


@dataclass
class ToyTable:
    schema: TableSchema
    numeric: tuple[bool, ...]
    rows: list[list[str]]


def _random_table(rng: random.Random) -> ToyTable:
    M = rng.randint(3, 5)
    words = rng.sample(HEADER_WORDS, M)
    headers = [w.capitalize() for w in words]
    numeric = tuple(rng.random() < 0.5 for _ in range(M))
    rows = []
    for _ in range(rng.randint(4, 8)):
        row = []
        for k in range(M):
            if numeric[k]:
                row.append(str(rng.randint(1, 99)))
            elif rng.random() < 0.5:
                row.append(f"{rng.choice(FIRST)} {rng.choice(LAST)}")
            else:
                row.append(rng.choice(PLACES))
        rows.append(row)
    return ToyTable(TableSchema.from_headers(headers), numeric, rows)


AGG_WORDS = {"": "what is the", "MAX": "what is the highest", "MIN": "what is the lowest",
             "COUNT": "how many", "SUM": "what is the total", "AVG": "what is the average"}
OP_WORDS = {"=": "is", ">": "is more than", "<": "is less than"}


def sql_corpus(n_tables: int = 40, n_questions: int = 200, seed: int = 0):
    """Returns (examples, tables by id).  Each question mentions the
    selected column, every condition column, and every condition value."""
    rng = random.Random(seed)
    tables = {f"t{i}": _random_table(rng) for i in range(n_tables)}
    ids = sorted(tables)
    examples = []
    for q in range(n_questions):
        tid = ids[q % n_tables]
        tab = tables[tid]
        M = tab.schema.M
        sel = rng.randrange(M)
        if tab.numeric[sel]:
            agg = rng.choice(AGG_OPS)
        else:
            agg = rng.choice(["", "COUNT"])
        n_conds = rng.choice([0, 1, 1, 2, 2])
        others = [k for k in range(M) if k != sel]
        cols = rng.sample(others, min(n_conds, len(others)))
        row = rng.choice(tab.rows)
        conds = []
        for k in cols:
            value = row[k]
            if tab.numeric[k]:
                op = rng.choice(["=", ">", "<"])
            else:
                op = "="
            conds.append(Condition(k, op, tuple(value.split())))
        words = AGG_WORDS[agg].split() + tab.schema.header(sel).lower().split()
        for j, c in enumerate(conds):
            words += (["when"] if j == 0 else ["and"]) + tab.schema.header(c.col).lower().split()
            words += OP_WORDS[c.op].split() + list(c.value)
        query = SqlQuery(agg, sel, tuple(conds))
        rec = {"src": words, "sql": query.to_record(), "cols": tab.schema.headers, "table_id": tid}
        examples.append(make_example(rec, SQL))
    return examples, tables
