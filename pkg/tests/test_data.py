import json

import pytest
from test_meaning import ATIS, CONCERT_QUERY, CONCERT_SCHEMA, GEO
from test_sketch import DJANGO

from sketchparse.config import TrainConfig, dump_config, parse_config_text
from sketchparse.data import (
    COL_SEP,
    Vocab,
    Vocabs,
    build_vocabs,
    example_record,
    find_span,
    load_dataset,
    make_example,
    task_kind,
    write_dataset,
)
from sketchparse.errors import DatasetParseError, EmptyDataset, SketchMismatch
from sketchparse.sketch import CODE, LAMBDA, SQL

CONCERT_QUESTION = ("which record company recorded after 1996 with conductor mikhail snitko ?").split()


def _write(path, recs):
    path.write_text("".join(json.dumps(r) + "\n" for r in recs))
    return path


def test_reference_records_give_reference_sketches(tmp_path):
    _write(tmp_path / "geo.jsonl", [{"src": "which state has the most rivers", "mr": GEO}])
    _write(tmp_path / "atis.jsonl", [{"src": "flights from dallas before 10am", "mr": ATIS}])
    _write(tmp_path / "django.jsonl", [{"src": "if length of bits is lesser than 3", "mr": DJANGO}])
    _write(tmp_path / "sql.jsonl", [{"src": CONCERT_QUESTION, "sql": CONCERT_QUERY.to_record(),
                                     "cols": CONCERT_SCHEMA.headers}])
    got = [str(load_dataset(tmp_path / f, k)[0].sketch) for f, k in
           [("geo.jsonl", "geo"), ("atis.jsonl", "atis"), ("django.jsonl", "django"), ("sql.jsonl", "wikisql")]]
    assert got == ["(argmax#1 state:t@1 (count#1 (and river:t@1 loc:t@2 ) ) )",
                   "(lambda#2 (and flight@1 from@2 (< departure_time@1 ? ) ) )",
                   "if len ( NAME ) < NUMBER or NAME [ NUMBER ] != STRING :",
                   "WHERE > AND ="]


def test_sql_spans_found_case_insensitively():
    ex = make_example({"src": CONCERT_QUESTION, "sql": CONCERT_QUERY.to_record(),
                       "cols": CONCERT_SCHEMA.headers}, SQL)
    # conditions in sketch order: ">" 1996 then "=" Mikhail Snitko
    assert ex.spans == ((5, 5), (8, 9))
    assert find_span(["a", "b"], ["c"]) is None


def test_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("\n")
    with pytest.raises(EmptyDataset):
        load_dataset(tmp_path / "e.jsonl", "geo")


def test_parse_error_reports_line(tmp_path):
    _write(tmp_path / "d.jsonl", [{"src": "a", "mr": "(city:t $0)"}])
    with open(tmp_path / "d.jsonl", "a") as f:
        f.write("{not json\n")
    with pytest.raises(DatasetParseError) as err:
        load_dataset(tmp_path / "d.jsonl", "geo")
    assert err.value.line == 2


def test_missing_fields_and_unbalanced():
    with pytest.raises(DatasetParseError):
        make_example({"mr": "(a $0)"}, LAMBDA)
    with pytest.raises(DatasetParseError):
        make_example({"src": "x", "mr": "(a $0"}, LAMBDA, line=7)


def test_sketch_mismatch():
    with pytest.raises(SketchMismatch):
        make_example({"src": "x", "mr": "(city:t $0)", "sketch": "state:t@1"}, LAMBDA)
    ex = make_example({"src": "x", "mr": "(city:t $0)", "sketch": "city:t@1"}, LAMBDA)
    assert ex.sketch.tokens == ("city:t@1",)


def test_loader_idempotent_and_round_trip(tmp_path):
    recs = [{"src": "x y", "mr": "(city:t $0)"}, {"src": "z", "mr": GEO}]
    _write(tmp_path / "d.jsonl", recs)
    a = load_dataset(tmp_path / "d.jsonl", "geo")
    b = load_dataset(tmp_path / "d.jsonl", "geo")
    assert a == b
    assert build_vocabs(a) == build_vocabs(b)
    write_dataset(tmp_path / "w.jsonl", a)
    assert load_dataset(tmp_path / "w.jsonl", "geo") == a
    assert example_record(a[0])["mr"] == list(a[0].y)


def test_vocab_specials_and_unknown():
    v = Vocab.build([["b", "a", "b"], ["c"]])
    assert v.itos[:4] == ["<pad>", "<unk>", "<s>", "</s>"]
    assert v.itos[4:] == ["b", "a", "c"]
    assert v.id("zzz") == 1
    assert Vocab.build([["b", "a", "b"]], min_freq=2).itos[4:] == ["b"]


def test_build_vocabs_sql_and_json():
    ex = make_example({"src": CONCERT_QUESTION, "sql": CONCERT_QUERY.to_record(),
                       "cols": CONCERT_SCHEMA.headers}, SQL)
    v = build_vocabs([ex])
    assert COL_SEP in v.src and "Conductor" in v.src
    assert v.catalog == [("WHERE", ">", "AND", "=")]
    assert Vocabs.from_json(json.loads(json.dumps(v.to_json()))).to_json() == v.to_json()


def test_task_kinds():
    assert [task_kind(k) for k in ("geo", "atis", "django", "wikisql")] == [LAMBDA, LAMBDA, CODE, SQL]
    with pytest.raises(ValueError):
        task_kind("cobol")


def test_config_defaults_and_text_round_trip():
    lam = TrainConfig(kind="geo").resolved()
    assert (lam.n, lam.eps, lam.batch_size, lam.copy, lam.lr) == (250, 0.1, 64, False, 0.005)
    sql = TrainConfig(kind="wikisql").resolved()
    assert (sql.n, sql.eps, sql.batch_size) == (300, 0.0, 200)
    assert TrainConfig(kind="django").resolved().copy is True
    text = dump_config(lam)
    assert TrainConfig.from_dict(parse_config_text(text)) == lam


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        TrainConfig(kind="geo", n=251).resolved()
    with pytest.raises(ValueError):
        TrainConfig(kind="wikisql", n=250).resolved()
    with pytest.raises(ValueError):
        parse_config_text("hidden = 3")
    with pytest.raises(ValueError):
        parse_config_text("onestage = maybe")
    assert parse_config_text("lr = 0.002  # smaller\npatience = none") == {"lr": 0.002, "patience": None}
