"""The full parser: encoders and decoders wired per task and feature flags."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .config import TrainConfig
from .data import Example, Vocabs
from .decoders import (
    FineDecoder,
    FreeGrammar,
    LambdaSketchGrammar,
    LambdaTokenGrammar,
    SelectHead,
    SequenceDecoder,
    SketchClassifier,
    WhereDecoder,
)
from .encoders import (
    ColumnBatch,
    ColumnEncoder,
    EncodedInput,
    InputEncoder,
    SketchEncoder,
    TableAwareEncoder,
    WordEmbedder,
    pad_ids,
)
from .errors import NonConforming
from .meaning import AGG_OPS, Condition, SqlQuery
from .nn import tensor as T
from .nn.params import ParamSet
from .nn.tensor import Tensor
from .sketch import (
    LAMBDA,
    SQL,
    Sketch,
    expand_template,
    extract_from_prediction,
    invalid_sketch,
    sketch_ops,
    sorted_conditions,
)


@dataclass
class Prediction:
    y: Union[tuple[str, ...], SqlQuery, None]   # None when decoding failed
    sketch: Sketch                               # the sketch the output was conditioned on
    logp_sketch: float = 0.0
    logp_fine: float = 0.0

    @property
    def logp(self) -> float:
        return self.logp_sketch + self.logp_fine


def subset(enc: EncodedInput, rows) -> EncodedInput:
    rows = np.asarray(rows, dtype=np.int64)
    pick = lambda t: None if t is None else Tensor(t.data[rows])
    return EncodedInput(
        Tensor(enc.vectors.data[rows]), enc.mask[rows],
        (pick(enc.summary[0]), pick(enc.summary[1])),
        pick(enc.columns), None if enc.col_mask is None else enc.col_mask[rows],
        pick(enc.col_attention),
    )


class Parser:
    def __init__(self, config: TrainConfig, vocabs: Vocabs, dtype=np.float32):
        cfg = config.resolved()
        self.cfg, self.vocabs, self.kind = cfg, vocabs, cfg.kind
        ps = self.params = ParamSet(dtype, seed=cfg.seed)
        n, emb, drop = cfg.n, cfg.emb, cfg.dropout
        n_pos = len(vocabs.pos) if (cfg.use_pos and vocabs.pos is not None) else 0
        self.words = WordEmbedder(ps, "words", len(vocabs.src), emb, n_pos)
        self.sketch_enc = None
        if self.kind == SQL:
            self.columns = ColumnEncoder(ps, "columns", self.words, n)
            if cfg.table_aware:
                self.encoder = TableAwareEncoder(ps, "question", self.words, n)
            else:
                self.encoder = InputEncoder(ps, "question", self.words, n)
            self.select = SelectHead(ps, "select", n)
            if not cfg.onestage:
                self.classifier = SketchClassifier(ps, "sketch_cls", n, vocabs.catalog)
                self.sketch_enc = SketchEncoder(ps, "sketch_enc", len(vocabs.sketch), emb, n,
                                                use_rnn=cfg.sketch_encoder)
            self.where = WhereDecoder(ps, "where", n, onestage=cfg.onestage, dropout=drop)
        else:
            self.encoder = InputEncoder(ps, "input", self.words, n)
            pf = cfg.parent_feed and self.kind == LAMBDA
            if cfg.onestage:
                grammar = LambdaTokenGrammar(vocabs.tgt) if self.kind == LAMBDA else FreeGrammar(vocabs.tgt)
                self.onestage_dec = SequenceDecoder(ps, "onestage", vocabs.tgt, emb, n, grammar=grammar,
                                                    parent_feed=pf, copy=cfg.copy, eps=cfg.eps,
                                                    dropout=drop, max_len=cfg.max_len)
            else:
                grammar = LambdaSketchGrammar(vocabs.sketch) if self.kind == LAMBDA else FreeGrammar(vocabs.sketch)
                self.coarse = SequenceDecoder(ps, "coarse", vocabs.sketch, emb, n, grammar=grammar,
                                              parent_feed=pf, eps=cfg.eps, dropout=drop, max_len=cfg.max_len)
                self.sketch_enc = SketchEncoder(ps, "sketch_enc", len(vocabs.sketch), emb, n,
                                                use_rnn=cfg.sketch_encoder)
                self.fine = FineDecoder(ps, "fine", vocabs.tgt, self.kind, emb, n, parent_feed=pf,
                                        copy=cfg.copy, eps=cfg.eps, dropout=drop)

    # -- encoding -------------------------------------------------------------

    def encode(self, examples: Sequence[Example], *, train=False, rng=None) -> EncodedInput:
        ids, mask = pad_ids([self.vocabs.src.ids(ex.src) for ex in examples])
        pos_ids = None
        if self.words.P is not None:
            pos_ids = np.ones_like(ids)
            for b, ex in enumerate(examples):
                if ex.pos:
                    pos_ids[b, :len(ex.pos)] = self.vocabs.pos.ids(ex.pos)
        drop = dict(dropout=self.cfg.dropout, train=train, rng=rng)
        if self.kind != SQL:
            return self.encoder(ids, mask, pos_ids, **drop)
        cols = ColumnBatch.build([ex.schema for ex in examples], self.vocabs.src)
        C = self.columns(cols, **drop)
        if self.cfg.table_aware:
            return self.encoder(ids, mask, C, cols.col_mask, pos_ids, **drop)
        enc = self.encoder(ids, mask, pos_ids, **drop)
        enc.columns, enc.col_mask = C, cols.col_mask
        return enc

    def encode_sketches(self, sketches: Sequence[Sequence[str]], *, train=False, rng=None) -> Tensor:
        ids, mask = pad_ids([self.vocabs.sketch.ids(s) for s in sketches])
        return self.sketch_enc(ids, mask, dropout=self.cfg.dropout, train=train, rng=rng)

    # -- training objective -----------------------------------------------------

    def loss_terms(self, examples: Sequence[Example], *, train=False, rng=None) -> tuple[Tensor, Tensor]:
        """Per-example (coarse, fine) negative log-likelihoods, each (B,)."""
        B = len(examples)
        enc = self.encode(examples, train=train, rng=rng)
        zero = Tensor(np.zeros(B, dtype=self.params.dtype))
        srcs = [ex.src for ex in examples]
        if self.kind != SQL:
            targets = [ex.target for ex in examples]
            if self.cfg.onestage:
                batch = self.onestage_dec.prepare(targets, srcs)
                return zero, self.onestage_dec.nll(enc, batch, train=train, rng=rng)
            coarse = self.coarse.nll(enc, self.coarse.prepare([ex.sketch.tokens for ex in examples]),
                                     train=train, rng=rng)
            vecs = self.encode_sketches([ex.sketch.tokens for ex in examples], train=train, rng=rng)
            templates = [expand_template(ex.sketch) for ex in examples]
            batch = self.fine.prepare(templates, targets, vecs.shape[1], srcs)
            return coarse, self.fine.nll(enc, vecs, batch, train=train, rng=rng)

        for ex in examples:
            if ex.spans is None:
                raise NonConforming("condition value not found in the question")
        agg_logits, col_logits = self.select.logits(enc)
        agg_gold = np.array([AGG_OPS.index(ex.y.agg_op) for ex in examples])
        sel_gold = np.array([ex.y.agg_col for ex in examples])
        fine = T.cross_entropy(agg_logits, agg_gold) + T.cross_entropy(col_logits, sel_gold, 0.0, enc.col_mask)
        conds = [sorted_conditions(ex.y) for ex in examples]
        spans = [ex.spans for ex in examples]
        M = enc.columns.shape[1]
        if self.cfg.onestage:
            batch = self.where.prepare(None, conds, B, 0, M, spans)
            return zero, fine + self.where.nll(enc, None, batch, train=train, rng=rng)
        cat = np.array([self.classifier.index[ex.sketch.tokens] for ex in examples])
        coarse = T.cross_entropy(self.classifier.logits(enc), cat)
        vecs = self.encode_sketches([ex.sketch.tokens for ex in examples], train=train, rng=rng)
        templates = [expand_template(ex.sketch) for ex in examples]
        batch = self.where.prepare(templates, conds, B, vecs.shape[1], M, spans)
        return coarse, fine + self.where.nll(enc, vecs, batch, train=train, rng=rng)

    def loss(self, examples: Sequence[Example], *, train=False, rng=None) -> Tensor:
        """Mean over the batch of -[log p(y|x,a) + log p(a|x)]."""
        coarse, fine = self.loss_terms(examples, train=train, rng=rng)
        return T.sum_(coarse + fine) * (1.0 / len(examples))

    # -- inference ------------------------------------------------------------

    def predict(self, examples: Sequence[Example], *, oracle: bool = False) -> list[Prediction]:
        """Greedy two-stage decoding; ``oracle`` conditions on the gold sketch."""
        if not examples:
            return []
        enc = self.encode(examples)
        srcs = [ex.src for ex in examples]
        if self.kind == SQL:
            return self._predict_sql(examples, enc, oracle)
        if self.cfg.onestage:
            out = []
            for ex, (toks, lp) in zip(examples, self.onestage_dec.greedy(enc, srcs)):
                y = tuple(toks) if toks is not None else None
                out.append(Prediction(y, extract_from_prediction(list(y) if y else None, self.kind), 0.0, lp))
            return out
        if oracle:
            sketches = [ex.sketch for ex in examples]
            lp_a = -self.coarse.nll(enc, self.coarse.prepare([s.tokens for s in sketches])).data
        else:
            sketches, lp_a = [], []
            for toks, lp in self.coarse.greedy(enc):
                sketches.append(Sketch(tuple(toks), self.kind) if toks else invalid_sketch(self.kind))
                lp_a.append(lp)
        templates, rows = [], []
        for b, sk in enumerate(sketches):
            if sk.is_invalid:
                continue
            try:
                templates.append(expand_template(sk))
                rows.append(b)
            except NonConforming:
                sketches[b] = invalid_sketch(self.kind)
        preds = [Prediction(None, sketches[b], float(lp_a[b])) for b in range(len(examples))]
        if rows:
            sub = subset(enc, rows)
            vecs = self.encode_sketches([sketches[b].tokens for b in rows])
            filled = self.fine.greedy(sub, vecs, templates, [srcs[b] for b in rows])
            for b, (toks, lp) in zip(rows, filled):
                preds[b].y = tuple(toks)
                preds[b].logp_fine = lp
        return preds

    def _predict_sql(self, examples, enc, oracle) -> list[Prediction]:
        B = len(examples)
        agg_logits, col_logits = self.select.logits(enc)
        lagg = T.log_softmax_np(agg_logits.data.astype(np.float64))
        lcol = T.log_softmax_np(col_logits.data.astype(np.float64), enc.col_mask)
        agg = lagg.argmax(axis=1)
        sel = lcol.argmax(axis=1)
        lp_sel = lagg[np.arange(B), agg] + lcol[np.arange(B), sel]
        if self.cfg.onestage:
            where = self.where.greedy(enc, None, None)
            lp_a = np.zeros(B)
        else:
            if oracle:
                sketches = [ex.sketch for ex in examples]
                lcat = T.log_softmax_np(self.classifier.logits(enc).data.astype(np.float64))
                lp_a = np.array([lcat[b, self.classifier.index[s.tokens]] if s.tokens in self.classifier.index
                                 else 0.0 for b, s in enumerate(sketches)])
            else:
                lcat = T.log_softmax_np(self.classifier.logits(enc).data.astype(np.float64))
                k = lcat.argmax(axis=1)
                sketches = [Sketch(self.classifier.catalog[i], SQL) for i in k]
                lp_a = lcat[np.arange(B), k]
            vecs = self.encode_sketches([s.tokens for s in sketches])
            where = self.where.greedy(enc, vecs, [expand_template(s) for s in sketches],
                                      [sketch_ops(s) for s in sketches])
        preds = []
        for b, ex in enumerate(examples):
            steps, lp_w = where[b]
            conds = tuple(Condition(st.col, st.op, tuple(ex.src[st.span[0]:st.span[1] + 1])) for st in steps)
            q = SqlQuery(AGG_OPS[agg[b]], int(sel[b]), conds)
            sk = extract_from_prediction(q, SQL) if self.cfg.onestage else sketches[b]
            preds.append(Prediction(q, sk, float(lp_a[b]), float(lp_sel[b] + lp_w)))
        return preds
