"""Random generators shared by the property tests."""

import random

from sketchparse.meaning import (
    AGG_OPS,
    COND_OPS,
    Condition,
    SqlQuery,
    TableSchema,
    make_node,
)

PREDS = ["state:t", "city:t", "loc:t", "and", "or", "not", "<", ">", "=", "fare", "from", "to"]
BINDERS = ["lambda", "count", "argmax", "exists", "the", "sum"]
TERMS = ["$0", "$1", "$2", "texas:s", "50:do", "1000:ti", "e", "i", "dallas:ci"]
#: one "criterion N: PASS|FAIL ..." line per acceptance criterion, printed at session end
ACCEPTANCE_LINES: list[str] = []

WORDS = ["year", "of", "record", "name", "team", "score", "city", "date", "pick", "round"]


def random_tree(rng: random.Random, depth: int = 0):
    if rng.random() < 0.25 and depth > 0:
        pred = rng.choice(BINDERS)
    else:
        pred = rng.choice(PREDS)
    n = rng.randint(0, 3)
    args = []
    for _ in range(n):
        if depth < 4 and rng.random() < 0.45:
            args.append(random_tree(rng, depth + 1))
        else:
            args.append(rng.choice(TERMS))
    return make_node(pred, args)


def random_schema(rng: random.Random) -> TableSchema:
    M = rng.randint(1, 6)
    cols = []
    while len(cols) < M:
        name = tuple(rng.choice(WORDS).capitalize() for _ in range(rng.randint(1, 3)))
        if name not in cols:
            cols.append(name)
    return TableSchema(tuple(cols))


def random_query(rng: random.Random, schema: TableSchema) -> SqlQuery:
    conds = []
    for _ in range(rng.randint(0, 4)):
        value = tuple(rng.choice(["a", "b", "1996", "mikhail", "3.5", "x-y"])
                      for _ in range(rng.randint(1, 3)))
        conds.append(Condition(rng.randrange(schema.M), rng.choice(COND_OPS), value))
    return SqlQuery(rng.choice(AGG_OPS), rng.randrange(schema.M), tuple(conds))


def tiny_parser(kind, examples, *, n=8, emb=6, tgt_min_freq=None, seed=0, **flags):
    """Small float64 parser over ``examples`` for fast structural tests."""
    import numpy as np

    from sketchparse.config import TrainConfig
    from sketchparse.data import build_vocabs
    from sketchparse.model import Parser

    cfg = TrainConfig(kind=kind, n=n, emb=emb, dropout=0.0, seed=seed, scorer_hidden=4,
                      tgt_min_freq=tgt_min_freq, **flags)
    return Parser(cfg, build_vocabs(examples, 1, tgt_min_freq), dtype=np.float64)


# -- SQL execution oracle backed by sqlite ----------------------------------------

TEXT_CELLS = ["red", "Red", "blue", "new york", "New York", "snitko", "n/a"]
NUM_CELLS = ["1", "2", "3", "3.0", "2.5", "10", "-4", "1996", "0", "n/a"]


def random_table(rng: random.Random, max_rows: int = 8):
    """A random table instance plus which columns hold numbers."""
    from sketchparse.evaluation import TableInstance

    schema = random_schema(rng)
    numeric = [rng.random() < 0.6 for _ in range(schema.M)]
    rows = [[rng.choice(NUM_CELLS if numeric[k] else TEXT_CELLS) for k in range(schema.M)]
            for _ in range(rng.randint(0, max_rows))]
    return TableInstance(schema, rows), numeric


def random_table_query(rng: random.Random, table, numeric) -> SqlQuery:
    M = table.schema.M
    conds = []
    for _ in range(rng.randint(0, 3)):
        col = rng.randrange(M)
        pool = NUM_CELLS if numeric[col] else TEXT_CELLS
        value = rng.choice(pool + ["7", "RED", "zzz"])
        conds.append(Condition(col, rng.choice(COND_OPS), tuple(value.split())))
    return SqlQuery(rng.choice(AGG_OPS), rng.randrange(M), tuple(conds))


def _as_number(text):
    try:
        return float(text)
    except ValueError:
        return None


def sqlite_execute(q: SqlQuery, table, numeric) -> list:
    """Run ``q`` through sqlite.  Numeric columns use REAL affinity so
    number-like cells are stored as numbers; text comparisons are
    case-insensitive; order comparisons and aggregates only see numbers."""
    import sqlite3

    con = sqlite3.connect(":memory:")
    cols = [f"c{k} {'REAL' if numeric[k] else 'TEXT'} COLLATE NOCASE" for k in range(table.schema.M)]
    con.execute(f"CREATE TABLE t ({', '.join(cols)})")
    if table.rows:
        marks = ", ".join("?" * table.schema.M)
        con.executemany(f"INSERT INTO t VALUES ({marks})", table.rows)
    where, args = [], []
    for c in q.conds:
        text = " ".join(c.value)
        num = _as_number(text)
        isnum = f"typeof(c{c.col}) IN ('integer', 'real')"
        if c.op == "=":
            if num is not None:
                where.append(f"(({isnum} AND c{c.col} = ?) OR (NOT {isnum} AND c{c.col} = ?))")
                args += [num, text]
            else:
                where.append(f"c{c.col} = ?")
                args.append(text)
        elif num is None:
            where.append("0")
        else:
            where.append(f"({isnum} AND c{c.col} {c.op} ?)")
            args.append(num)
    sel = f"c{q.agg_col}"
    only_num = f"CASE WHEN typeof({sel}) IN ('integer', 'real') THEN {sel} END"
    expr = {"": sel, "COUNT": "COUNT(*)", "MAX": f"MAX({only_num})", "MIN": f"MIN({only_num})",
            "SUM": f"SUM({only_num})", "AVG": f"AVG({only_num})"}[q.agg_op]
    sql = f"SELECT {expr} FROM t" + (" WHERE " + " AND ".join(where) if where else "")
    out = [r[0] for r in con.execute(sql, args).fetchall()]
    con.close()
    return [v for v in out if v is not None]


def same_results(ours, oracle) -> bool:
    """Multiset comparison; numbers within 1e-9 relative."""
    if len(ours) != len(oracle):
        return False

    def norm(v):
        n = _as_number(str(v))
        return (0, n) if n is not None else (1, str(v))

    a, b = sorted(map(norm, ours)), sorted(map(norm, oracle))
    for x, y in zip(a, b):
        if x[0] != y[0]:
            return False
        if x[0] == 0 and abs(x[1] - y[1]) > 1e-9 * (1 + abs(y[1])):
            return False
        if x[0] == 1 and x[1] != y[1]:
            return False
    return True
