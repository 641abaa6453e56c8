import numpy as np
import pytest
from test_meaning import CONCERT_SCHEMA

from sketchparse.data import COL_SEP, Vocab
from sketchparse.encoders import (
    ALPHA_SIZE,
    ColumnBatch,
    ColumnEncoder,
    InputEncoder,
    SketchEncoder,
    TableAwareEncoder,
    WordEmbedder,
    column_sequence,
    encode_columns,
    encode_input,
    encode_sketch,
    encode_table_question,
    load_embeddings,
    pad_ids,
)
from sketchparse.errors import EmptyInput, EmptySchema
from sketchparse.meaning import TableSchema
from sketchparse.nn import tensor as T
from sketchparse.nn.gradcheck import grad_check
from sketchparse.nn.params import ParamSet

WORDS = ["how", "many", "presidents", "are", "there", "?", COL_SEP] + \
    [w for col in CONCERT_SCHEMA.columns for w in col] + ["Name", "Party", "Year"]
VOCAB = Vocab.build([WORDS])


def _parts(n=8, emb=6, seed=0):
    ps = ParamSet(np.float64, seed=seed)
    words = WordEmbedder(ps, "w", len(VOCAB), emb)
    return ps, words


def test_encode_input_shapes_and_length_one():
    ps, words = _parts(n=300)
    enc = InputEncoder(ps, "in", words, 300)
    out = encode_input(["how", "many", "presidents"], enc, VOCAB)
    assert out.vectors.shape == (1, 3, 300)
    assert out.summary_vector.shape == (1, 300)
    one = encode_input(["how"], enc, VOCAB)
    v = one.vectors.data[0, 0]
    np.testing.assert_array_equal(one.summary_vector.data[0], v)


def test_empty_inputs_raise():
    ps, words = _parts()
    with pytest.raises(EmptyInput):
        encode_input([], InputEncoder(ps, "in", words, 8), VOCAB)
    with pytest.raises(EmptyInput):
        encode_sketch([], SketchEncoder(ps, "sk", 10, 6, 8), VOCAB)
    with pytest.raises(EmptyInput):
        pad_ids([[1, 2], []])


def test_unknown_words_share_one_row():
    ps, words = _parts()
    a = words(np.array([[VOCAB.id("zebra"), VOCAB.id("yak")]])).data
    np.testing.assert_array_equal(a[0, 0], a[0, 1])
    np.testing.assert_array_equal(a[0, 0], words.W.data[1])


def test_padding_does_not_change_encodings():
    ps, words = _parts()
    enc = InputEncoder(ps, "in", words, 8)
    short = VOCAB.ids(["how", "many"])
    long = VOCAB.ids(["how", "many", "presidents", "are", "there"])
    ids, mask = pad_ids([short, long])
    both = enc(ids, mask)
    alone = enc(*pad_ids([short]))
    np.testing.assert_allclose(both.vectors.data[0, :2], alone.vectors.data[0], atol=1e-12)
    np.testing.assert_allclose(both.summary_vector.data[0], alone.summary_vector.data[0], atol=1e-12)


def test_encode_sketch_one_vector_per_token():
    sk = ["(count#1", "(<", "fare@1", "?", ")", ")"]
    v = Vocab.build([sk])
    ps = ParamSet(np.float64)
    out = encode_sketch(sk, SketchEncoder(ps, "sk", len(v), 6, 8), v)
    assert out.shape == (6, 8)
    assert encode_sketch(["city:t@1"], SketchEncoder(ps, "sk2", len(v), 6, 8), v).shape == (1, 8)
    plain = encode_sketch(sk, SketchEncoder(ps, "sk3", len(v), 6, 8, use_rnn=False), v)
    assert plain.shape == (6, 8)


def test_column_sequence_and_vectors():
    words, first, last = column_sequence(CONCERT_SCHEMA)
    assert words[0] == COL_SEP and words[first[2]] == "Record" and words[last[2]] == "Company"
    ps, emb = _parts()
    cenc = ColumnEncoder(ps, "col", emb, 8)
    C = encode_columns(CONCERT_SCHEMA, cenc, VOCAB)
    assert C.shape == (5, 8)
    single = encode_columns(TableSchema.from_headers(["Party"]), cenc, VOCAB).data[0]
    # one one-word column: both halves come from the same position's state
    cols = ColumnBatch.build([TableSchema.from_headers(["Party"])], VOCAB)
    states, _, _ = cenc.rnn(T.embedding(emb.W, cols.ids), cols.mask)
    np.testing.assert_array_equal(single[:4], states.data[0, 1])
    np.testing.assert_array_equal(single[4:], states.data[0, 1])
    with pytest.raises(EmptySchema):
        TableSchema(())
    with pytest.raises(ValueError):
        ColumnEncoder(ps, "bad", emb, 10)


def test_column_vectors_change_with_any_header_word():
    ps, emb = _parts()
    cenc = ColumnEncoder(ps, "col", emb, 8)
    base = encode_columns(CONCERT_SCHEMA, cenc, VOCAB).data
    headers = CONCERT_SCHEMA.headers
    for k in range(len(headers)):
        changed = list(headers)
        changed[k] = "Year"
        if changed[k] == headers[k]:
            changed[k] = "Party"
        other = encode_columns(TableSchema.from_headers(changed), cenc, VOCAB).data
        assert not np.allclose(base, other)


def _table_aware(seed=0):
    ps, emb = _parts(seed=seed)
    return ps, TableAwareEncoder(ps, "q", emb, 8), ColumnEncoder(ps, "col", emb, 8)


def test_table_aware_attention_normalized_and_schema_dependent():
    _, tae, cenc = _table_aware()
    q = ["how", "many", "presidents", "are", "there", "?"]
    a = encode_table_question(q, CONCERT_SCHEMA, tae, cenc, VOCAB)
    np.testing.assert_allclose(a.col_attention.data.sum(-1), 1.0, atol=1e-6)
    b = encode_table_question(q, TableSchema.from_headers(["Name", "Party", "Year"]), tae, cenc, VOCAB)
    assert not np.allclose(a.summary_vector.data, b.summary_vector.data)
    assert tae.alpha.W.shape[1] == ALPHA_SIZE


def test_table_aware_single_column():
    _, tae, cenc = _table_aware()
    schema = TableSchema.from_headers(["Party"])
    out = encode_table_question(["how", "many"], schema, tae, cenc, VOCAB)
    np.testing.assert_allclose(out.col_attention.data, 1.0)
    with pytest.raises(EmptyInput):
        encode_table_question([], schema, tae, cenc, VOCAB)


def test_encoders_deterministic_and_gradcheck():
    ps, tae, cenc = _table_aware(seed=3)
    cols = ColumnBatch.build([CONCERT_SCHEMA, TableSchema.from_headers(["Name", "Party"])], VOCAB)
    ids, mask = pad_ids([VOCAB.ids(["how", "many", "presidents"]), VOCAB.ids(["are", "there"])])

    def f():
        out = tae(ids, mask, cenc(cols), cols.col_mask)
        return T.sum_(T.tanh(out.vectors)) + T.sum_(out.summary_vector * out.summary_vector)

    assert float(f().data) == float(f().data)
    assert grad_check(f, list(ps), max_entries=4) < 1e-4


def test_load_embeddings(tmp_path):
    ps, words = _parts(emb=3)
    (tmp_path / "e.txt").write_text("how 1 2 3\nunseen 4 5 6\nmany 0.5 0.5 0.5\n")
    assert load_embeddings(tmp_path / "e.txt", VOCAB, words.W) == 2
    np.testing.assert_array_equal(words.W.data[VOCAB.id("how")], [1, 2, 3])
    (tmp_path / "bad.txt").write_text("how 1 2\n")
    with pytest.raises(ValueError):
        load_embeddings(tmp_path / "bad.txt", VOCAB, words.W)
