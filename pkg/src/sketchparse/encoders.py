"""Input, sketch, column and table-aware question encoders.

All encoders work on right-padded id batches ``(B, T)`` with a boolean mask
and return :class:`EncodedInput` records whose vectors have size ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import COL_SEP, Vocab
from .errors import EmptyInput, EmptySchema
from .meaning import TableSchema
from .nn import tensor as T
from .nn.layers import BiLSTM, Linear
from .nn.params import ParamSet
from .nn.tensor import Tensor

#: hidden size of the column-attention projection
ALPHA_SIZE = 64
POS_SIZE = 10


@dataclass
class EncodedInput:
    vectors: Tensor                     # (B, T, n)
    mask: np.ndarray                    # (B, T)
    summary: tuple[Tensor, Tensor]      # decoder initial (h, c), each (B, n)
    columns: Tensor | None = None       # (B, M, n)
    col_mask: np.ndarray | None = None  # (B, M)
    col_attention: Tensor | None = None  # (B, T, M)

    @property
    def summary_vector(self) -> Tensor:
        return self.summary[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


def pad_ids(seqs: Sequence[Sequence[int]], pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists into (ids, mask)."""
    if not seqs or min(len(s) for s in seqs) == 0:
        raise EmptyInput("every sequence needs at least one token")
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


class WordEmbedder:
    """Word embeddings, optionally concatenated with part-of-speech vectors."""

    def __init__(self, params: ParamSet, name: str, vocab_size: int, dim: int, n_pos: int = 0):
        self.W = params.add(f"{name}.W", (vocab_size, dim))
        self.P = params.add(f"{name}.pos", (n_pos, POS_SIZE)) if n_pos else None
        self.dim = dim + (POS_SIZE if n_pos else 0)

    def __call__(self, ids, pos_ids=None) -> Tensor:
        x = T.embedding(self.W, ids)
        if self.P is not None:
            if pos_ids is None:
                pos_ids = np.ones_like(ids)  # unknown tag
            x = T.concat([x, T.embedding(self.P, pos_ids)], axis=-1)
        return x


class InputEncoder:
    """Bidirectional LSTM over the input tokens."""

    def __init__(self, params: ParamSet, name: str, embedder: WordEmbedder, n: int):
        self.embed = embedder
        self.rnn = BiLSTM(params, f"{name}.rnn", embedder.dim, n)

    def __call__(self, ids, mask, pos_ids=None, *, dropout=0.0, train=False, rng=None) -> EncodedInput:
        if ids.shape[1] == 0:
            raise EmptyInput("empty input")
        x = T.dropout(self.embed(ids, pos_ids), dropout, train, rng)
        states, h, c = self.rnn(x, mask)
        return EncodedInput(states, mask, (h, c))


class SketchEncoder:
    """Bidirectional LSTM over sketch tokens, or (``use_rnn=False``) plain
    sketch-token embeddings of width ``n``."""

    def __init__(self, params: ParamSet, name: str, vocab_size: int, emb: int, n: int, use_rnn: bool = True):
        self.use_rnn = use_rnn
        self.W = params.add(f"{name}.W", (vocab_size, emb if use_rnn else n))
        self.rnn = BiLSTM(params, f"{name}.rnn", emb, n) if use_rnn else None

    def __call__(self, ids, mask, *, dropout=0.0, train=False, rng=None) -> Tensor:
        if ids.shape[1] == 0:
            raise EmptyInput("empty sketch")
        x = T.embedding(self.W, ids)
        if not self.use_rnn:
            return x
        states, _, _ = self.rnn(T.dropout(x, dropout, train, rng), mask)
        return states


def column_sequence(schema: TableSchema) -> tuple[list[str], list[int], list[int]]:
    """Header words joined by the delimiter, with each column's first and
    last word positions."""
    if schema is None or schema.M == 0:
        raise EmptySchema("table has no columns")
    words = [COL_SEP]
    first, last = [], []
    for col in schema.columns:
        first.append(len(words))
        words += list(col)
        last.append(len(words) - 1)
        words.append(COL_SEP)
    return words, first, last


@dataclass
class ColumnBatch:
    ids: np.ndarray      # (B, L) header word ids
    mask: np.ndarray     # (B, L)
    first: np.ndarray    # (B, M)
    last: np.ndarray     # (B, M)
    col_mask: np.ndarray  # (B, M)

    @classmethod
    def build(cls, schemas: Sequence[TableSchema], vocab: Vocab) -> "ColumnBatch":
        seqs, firsts, lasts = [], [], []
        for s in schemas:
            words, f, l = column_sequence(s)
            seqs.append(vocab.ids(words))
            firsts.append(f)
            lasts.append(l)
        ids, mask = pad_ids(seqs)
        M = max(len(f) for f in firsts)
        first = np.zeros((len(schemas), M), dtype=np.int64)
        last = np.zeros((len(schemas), M), dtype=np.int64)
        col_mask = np.zeros((len(schemas), M), dtype=bool)
        for i, (f, l) in enumerate(zip(firsts, lasts)):
            first[i, :len(f)] = f
            last[i, :len(l)] = l
            col_mask[i, :len(f)] = True
        return cls(ids, mask, first, last, col_mask)


class ColumnEncoder:
    """c_k = [state at the first word of column k, state at its last word];
    the underlying BiLSTM has total size n/2 so c_k has size n."""

    def __init__(self, params: ParamSet, name: str, embedder: WordEmbedder, n: int):
        if n % 4:
            raise ValueError("column encoding needs n divisible by 4")
        self.embed = embedder
        self.rnn = BiLSTM(params, f"{name}.rnn", embedder.W.shape[1], n // 2)

    def __call__(self, cols: ColumnBatch, *, dropout=0.0, train=False, rng=None) -> Tensor:
        x = T.dropout(T.embedding(self.embed.W, cols.ids), dropout, train, rng)
        states, _, _ = self.rnn(x, cols.mask)
        b = np.arange(cols.ids.shape[0])[:, None]
        return T.concat([T.index(states, (b, cols.first)), T.index(states, (b, cols.last))], axis=-1)


class TableAwareEncoder:
    """Question encoder that attends over column vectors between two
    bidirectional passes (separate weights per pass)."""

    def __init__(self, params: ParamSet, name: str, embedder: WordEmbedder, n: int):
        self.embed = embedder
        self.first = BiLSTM(params, f"{name}.rnn1", embedder.dim, n)
        self.alpha = Linear(params, f"{name}.alpha", n, ALPHA_SIZE)
        self.second = BiLSTM(params, f"{name}.rnn2", 2 * n, n)

    def __call__(self, ids, mask, columns: Tensor, col_mask, pos_ids=None, *, dropout=0.0,
                 train=False, rng=None) -> EncodedInput:
        if ids.shape[1] == 0:
            raise EmptyInput("empty question")
        if columns.shape[1] == 0:
            raise EmptySchema("table has no columns")
        x = T.dropout(self.embed(ids, pos_ids), dropout, train, rng)
        e, _, _ = self.first(x, mask)
        ae = T.tanh(self.alpha(e))
        ac = T.tanh(self.alpha(columns))
        u = T.softmax(T.matmul(ae, T.swapaxes(ac, 1, 2)), col_mask[:, None, :])
        ctx = T.matmul(u, columns)
        states, h, c = self.second(T.concat([e, ctx], axis=-1), mask)
        return EncodedInput(states, mask, (h, c), columns, col_mask, u)


# ---------------------------------------------------------------------------
# single-example conveniences
# ---------------------------------------------------------------------------


def encode_input(tokens: Sequence[str], encoder: InputEncoder, vocab: Vocab) -> EncodedInput:
    if not tokens:
        raise EmptyInput("empty input")
    ids, mask = pad_ids([vocab.ids(tokens)])
    return encoder(ids, mask)


def encode_sketch(tokens: Sequence[str], encoder: SketchEncoder, vocab: Vocab) -> Tensor:
    """One vector per sketch token, shaped (len(tokens), n)."""
    if not tokens:
        raise EmptyInput("empty sketch")
    ids, mask = pad_ids([vocab.ids(tokens)])
    return encoder(ids, mask)[0]


def encode_columns(schema: TableSchema, encoder: ColumnEncoder, vocab: Vocab) -> Tensor:
    """Column vectors (M, n)."""
    return encoder(ColumnBatch.build([schema], vocab))[0]


def encode_table_question(tokens: Sequence[str], schema: TableSchema, encoder: TableAwareEncoder,
                          col_encoder: ColumnEncoder, vocab: Vocab) -> EncodedInput:
    if not tokens:
        raise EmptyInput("empty question")
    cols = ColumnBatch.build([schema], vocab)
    ids, mask = pad_ids([vocab.ids(tokens)])
    return encoder(ids, mask, col_encoder(cols), cols.col_mask)


def load_embeddings(path, vocab: Vocab, W: Tensor) -> int:
    """Seed rows of ``W`` for in-vocabulary tokens from a text embedding file
    (token followed by its components per line).  Returns rows filled."""
    filled = 0
    dim = W.shape[1]
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2 or parts[0] not in vocab:
                continue
            if len(parts) - 1 != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} components, got {len(parts) - 1}")
            W.data[vocab.id(parts[0])] = np.asarray(parts[1:], dtype=W.dtype)
            filled += 1
    return filled
