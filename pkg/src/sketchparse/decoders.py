"""Decoders: coarse sketch decoder, sketch-constrained fine decoder, the
single-stage baseline, and the SQL heads (sketch classifier, SELECT
classifiers, WHERE decoder with column scoring and span selection).

Every sequence decoder shares :class:`AttnDecoder`: an LSTM whose input is
either a token embedding or an injected vector, dot-product attention over
the encoder states, and an output layer optionally fed with the hidden state
of the step that opened the current bracket (parent feeding).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import EOS, Vocab
from .encoders import EncodedInput
from .errors import EmptyCatalog, EmptySchema, NonConformingGold, SketchParseError, UnclassifiableToken
from .meaning import CLOSE, DEFAULT_BINDERS, OPEN, classify_code_token
from .nn import tensor as T
from .nn.layers import Linear, Scorer, attention
from .nn.params import ParamSet
from .nn.tensor import Tensor
from .sketch import ARG, CODE, COL, LAMBDA, Sketch, TemplateItem, parse_lambda_sketch_token

MAX_LEN = 100
MAX_CONDS = 4
SCORER_HIDDEN = 64
SPECIAL_IDS = (0, 1, 2, 3)  # pad, unk, bos, eos


def _np_log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


class AttnDecoder:
    def __init__(self, params: ParamSet, name: str, n: int, *, n_tok: int | None = None,
                 n_vec: int | None = None, vocab_size: int | None = None,
                 parent_feed: bool = False, copy: bool = False):
        self.n = n
        self.W_e = params.add(f"{name}.W_e", (n_tok, 4 * n)) if n_tok else None
        self.W_v = params.add(f"{name}.W_v", (n_vec, 4 * n)) if n_vec else None
        self.W_h = params.add(f"{name}.W_h", (n, 4 * n))
        self.b = params.add(f"{name}.b", (4 * n,), init="zeros")
        self.W1 = params.add(f"{name}.W1", (n, n))
        self.W2 = params.add(f"{name}.W2", (n, n))
        self.parent_feed = parent_feed
        if vocab_size:
            self.W_o = params.add(f"{name}.W_o", ((2 if parent_feed else 1) * n, vocab_size))
            self.b_o = params.add(f"{name}.b_o", (vocab_size,), init="zeros")
        else:
            self.W_o = None
        if copy:
            self.w_g = params.add(f"{name}.w_g", (n, 1))
            self.b_g = params.add(f"{name}.b_g", (1,), init="zeros")
        self.copy = copy

    def project(self, tok: Tensor | None = None, vec: Tensor | None = None, use_vec=None) -> Tensor:
        """Input projection; rows with ``use_vec`` take the injected vector."""
        if tok is not None and vec is not None:
            m = np.asarray(use_vec, dtype=self.b.dtype)[..., None]
            x = T.matmul(tok, self.W_e) * (1.0 - m) + T.matmul(vec, self.W_v) * m
        elif tok is not None:
            x = T.matmul(tok, self.W_e)
        else:
            x = T.matmul(vec, self.W_v)
        return x + self.b

    def unroll(self, xproj: Tensor, mask: np.ndarray, state) -> list[Tensor]:
        h, c = state
        hs = [h]
        for t in range(xproj.shape[1]):
            h, c = T.lstm_cell(xproj[:, t], h, c, self.W_h, mask[:, t])
            hs.append(h)
        return hs

    def attend(self, H: Tensor, enc: EncodedInput, *, dropout=0.0, train=False, rng=None):
        s, ctx = attention(H, enc.vectors, enc.mask)
        d_att = T.tanh(T.matmul(H, self.W1) + T.matmul(ctx, self.W2))
        return s, T.dropout(d_att, dropout, train, rng)

    def output(self, d_att: Tensor, parent: Tensor | None) -> Tensor:
        x = T.concat([d_att, parent], axis=-1) if self.parent_feed else d_att
        return T.matmul(x, self.W_o) + self.b_o

    def gate(self, d_att: Tensor) -> Tensor:
        g = T.sigmoid(T.matmul(d_att, self.w_g) + self.b_g)
        return T.reshape(g, g.shape[:-1])

    def teacher(self, xproj, mask, state, enc, parents=None, **drop):
        """Teacher-forced pass: (attention (B,T,L), d_att (B,T,n), logits, gate)."""
        hs = self.unroll(xproj, mask, state)
        H = T.stack(hs[1:], axis=1)
        s, d_att = self.attend(H, enc, **drop)
        logits = gate = None
        if self.W_o is not None:
            parent = None
            if self.parent_feed:
                allh = T.stack(hs, axis=1)
                parent = T.index(allh, (np.arange(H.shape[0])[:, None], parents))
            logits = self.output(d_att, parent)
        if self.copy:
            gate = self.gate(d_att)
        return s, d_att, logits, gate

    def step(self, xproj_t: Tensor, state, enc: EncodedInput, history: list[Tensor] | None = None,
             parents_t=None):
        """One inference step; returns (state, attention (B,L), d_att (B,n), logits, gate)."""
        h, c = T.lstm_cell(xproj_t, state[0], state[1], self.W_h)
        s, d_att = self.attend(T.reshape(h, (h.shape[0], 1, self.n)), enc)
        s = T.reshape(s, (s.shape[0], s.shape[2]))
        d_att = T.reshape(d_att, (h.shape[0], self.n))
        logits = gate = None
        if self.W_o is not None:
            parent = None
            if self.parent_feed:
                parent = Tensor(np.stack([history[p].data[b] for b, p in enumerate(parents_t)]))
            logits = self.output(d_att, parent)
        if self.copy:
            gate = self.gate(d_att)
        return (h, c), s, d_att, logits, gate


# ---------------------------------------------------------------------------
# output constraints
# ---------------------------------------------------------------------------

_SPECIAL, _OPEN, _OPEN_B, _LEAF, _HOLE, _CLOSE, _BAD, _TERM = range(8)


class LambdaSketchGrammar:
    """Keeps coarse lambda decoding inside the set of canonical sketches:
    a bracket closes only after a nested expression, and a binder's first
    child is never a bare placeholder (it would be a bound variable)."""

    def __init__(self, vocab: Vocab, binders=DEFAULT_BINDERS):
        cat = np.full(len(vocab), _BAD)
        cat[list(SPECIAL_IDS)] = _SPECIAL
        for i, tok in enumerate(vocab.itos):
            if i in SPECIAL_IDS:
                continue
            try:
                kind = parse_lambda_sketch_token(tok)
            except SketchParseError:
                continue
            if kind[0] == "open":
                if kind[1] in binders:
                    cat[i] = _OPEN_B
                elif kind[2] == 0:
                    cat[i] = _OPEN
            else:
                cat[i] = {"leaf": _LEAF, "hole": _HOLE, "close": _CLOSE}[kind[0]]
        self.cat = cat
        self.node = np.isin(cat, (_OPEN, _OPEN_B, _LEAF))
        self.hole = cat == _HOLE
        self.close = cat == _CLOSE
        self.eos = np.zeros(len(vocab), dtype=bool)
        self.eos[3] = True

    def start(self):
        return ([], False)

    def allowed(self, state) -> np.ndarray:
        stack, done = state
        if done:
            return self.eos.copy()
        if not stack:
            return self.node.copy()
        binder, n_children, has_node = stack[-1]
        m = self.node.copy()
        if not (binder and n_children == 0):
            m |= self.hole
        if has_node:
            m |= self.close
        return m

    def advance(self, state, tok: int):
        stack, done = state
        stack = [list(s) for s in stack]
        c = self.cat[tok]
        if c in (_OPEN, _OPEN_B, _LEAF):
            if stack:
                stack[-1][1] += 1
                stack[-1][2] = True
            if c == _LEAF:
                done = done or not stack
            else:
                stack.append([c == _OPEN_B, 0, False])
        elif c == _HOLE and stack:
            stack[-1][1] += 1
        elif c == _CLOSE and stack:
            stack.pop()
            done = not stack
        return (stack, done)


class LambdaTokenGrammar:
    """Bracket balance for full logical forms (single-stage decoding)."""

    def __init__(self, vocab: Vocab):
        cat = np.full(len(vocab), _TERM)
        cat[list(SPECIAL_IDS)] = _SPECIAL
        for i, tok in enumerate(vocab.itos):
            if i in SPECIAL_IDS:
                continue
            if tok == CLOSE:
                cat[i] = _CLOSE
            elif len(tok) > 1 and tok.startswith(OPEN):
                cat[i] = _OPEN
        cat[1] = _TERM  # unknown tokens stand for terminals
        self.cat = cat
        self.open = cat == _OPEN
        self.inner = np.isin(cat, (_OPEN, _TERM, _CLOSE))
        self.eos = np.zeros(len(vocab), dtype=bool)
        self.eos[3] = True

    def start(self):
        return (0, False)

    def allowed(self, state) -> np.ndarray:
        depth, done = state
        if done:
            return self.eos.copy()
        return (self.inner if depth else self.open).copy()

    def advance(self, state, tok: int):
        depth, done = state
        c = self.cat[tok]
        if c == _OPEN:
            depth += 1
        elif c == _CLOSE:
            depth -= 1
            done = depth == 0
        return (depth, done)


class FreeGrammar:
    """Any real token or the end marker."""

    def __init__(self, vocab: Vocab):
        self.mask = np.ones(len(vocab), dtype=bool)
        self.mask[[0, 2]] = False

    def start(self):
        return None

    def allowed(self, state):
        return self.mask.copy()

    def advance(self, state, tok):
        return None


def gold_masks(grammar, ids: Sequence[int]) -> np.ndarray:
    """Allowed-token masks along a gold sequence (gold always admitted)."""
    state = grammar.start()
    rows = []
    for tok in ids:
        m = grammar.allowed(state)
        m[tok] = True
        rows.append(m)
        state = grammar.advance(state, tok)
    return np.stack(rows)


def slot_masks(vocab: Vocab, kind: str) -> dict[str, np.ndarray]:
    """Output vocabulary allowed in each slot type (unknown token included)."""
    V = len(vocab)
    out: dict[str, np.ndarray] = {}
    if kind == LAMBDA:
        m = np.zeros(V, dtype=bool)
        for i, tok in enumerate(vocab.itos):
            if i not in SPECIAL_IDS and tok != CLOSE and not (len(tok) > 1 and tok.startswith(OPEN)):
                m[i] = True
        out[ARG] = m
    elif kind == CODE:
        for name in ("NAME", "NUMBER", "STRING"):
            out[name] = np.zeros(V, dtype=bool)
        for i, tok in enumerate(vocab.itos):
            if i in SPECIAL_IDS:
                continue
            try:
                k = classify_code_token(tok).kind.value
            except (UnclassifiableToken, SketchParseError):
                continue
            if k in out:
                out[k][i] = True
    for m in out.values():
        m[1] = True
    return out


def code_kind(tok: str) -> str | None:
    try:
        return classify_code_token(tok).kind.value
    except (UnclassifiableToken, SketchParseError):
        return None


# ---------------------------------------------------------------------------
# copying
# ---------------------------------------------------------------------------


def copy_distribution(gate: np.ndarray, attn: np.ndarray, p_vocab: np.ndarray,
                      src_ext: np.ndarray, V: int, n_ext: int | None = None) -> np.ndarray:
    """Mixture over the extended vocabulary (``V`` + source-only tokens).

    In-vocabulary entries get (1-g) p_vocab; entry ``V+j`` (the j-th
    source token outside the vocabulary) gets g times the attention mass on
    its occurrences and nothing from the vocabulary side.  Shapes:
    gate (...,), attn (..., L), p_vocab (..., V), src_ext (..., L).
    """
    n_ext = int(src_ext.max(initial=V - 1)) + 1 - V if n_ext is None else n_ext
    g = np.asarray(gate)[..., None]
    out = np.zeros(p_vocab.shape[:-1] + (V + n_ext,), dtype=np.float64)
    out[..., :V] = (1 - g) * p_vocab
    if n_ext:
        onehot = (src_ext[..., :, None] == np.arange(V, V + n_ext)).astype(np.float64)
        out[..., V:] = g * np.einsum("...l,...lj->...j", attn, onehot)
    return out


def oov_table(src: Sequence[str], vocab: Vocab) -> list[str]:
    """Distinct source tokens outside the output vocabulary, in order."""
    seen: list[str] = []
    for w in src:
        if w not in vocab and w not in seen:
            seen.append(w)
    return seen


def ext_ids(tokens: Sequence[str], vocab: Vocab, oov: Sequence[str]) -> list[int]:
    V = len(vocab)
    out = []
    for w in tokens:
        if w in vocab:
            out.append(vocab.id(w))
        elif w in oov:
            out.append(V + list(oov).index(w))
        else:
            out.append(1)
    return out


def _copy_nll(logits: Tensor, allowed: np.ndarray, gate: Tensor, s: Tensor, gold: np.ndarray,
              gold_ext: np.ndarray, src_ext: np.ndarray, V: int, weight: np.ndarray) -> Tensor:
    """-log p~(gold) at every (row, step) with ``weight``, 0 elsewhere.  A
    gold token found only in the source is scored by its copy mass alone;
    one absent from both falls back to the unknown-word row."""
    p = T.softmax(logits, allowed)
    lead = np.indices(gold.shape)
    pv = T.index(p, tuple(lead) + (gold,))
    match = ((src_ext[:, None, :] == gold_ext[..., None]) & (gold_ext[..., None] >= V))
    copy_mass = T.sum_(s * Tensor(match.astype(s.dtype)), axis=-1)
    in_vocab = Tensor(((gold_ext < V) | ~match.any(-1)).astype(s.dtype))
    mix = pv * (1.0 - gate) * in_vocab + gate * copy_mass
    w = weight.astype(mix.dtype)
    return -T.log(mix * w + (1.0 - w))


def _pick(scores: np.ndarray) -> int:
    """Argmax with the lowest index winning exact ties."""
    return int(np.argmax(scores))


# ---------------------------------------------------------------------------
# sequence decoders for lambda / code
# ---------------------------------------------------------------------------


@dataclass
class SeqBatch:
    """Teacher-forcing arrays for a free-running decoder (coarse/one-stage)."""

    inp: np.ndarray       # (B, T) previous-token ids, BOS first
    gold: np.ndarray      # (B, T) target ids (EOS last)
    mask: np.ndarray      # (B, T)
    parents: np.ndarray   # (B, T)
    allowed: np.ndarray   # (B, T, V)
    gold_ext: np.ndarray | None = None
    src_ext: np.ndarray | None = None


def parents_of(tokens: Sequence[str]) -> list[int]:
    stack, out = [], []
    for t, tok in enumerate(tokens, start=1):
        out.append(stack[-1] if stack else 0)
        if len(tok) > 1 and tok.startswith(OPEN):
            stack.append(t)
        elif tok == CLOSE and stack:
            stack.pop()
    return out


class SequenceDecoder:
    """Free-running decoder over a token vocabulary: the coarse sketch
    decoder, and (targeting full meaning representations) the single-stage
    baseline."""

    def __init__(self, params: ParamSet, name: str, vocab: Vocab, emb: int, n: int, *, grammar,
                 parent_feed: bool, copy: bool = False, eps: float = 0.0, dropout: float = 0.0,
                 max_len: int = MAX_LEN):
        self.vocab = vocab
        self.E = params.add(f"{name}.emb", (len(vocab), emb))
        self.dec = AttnDecoder(params, name, n, n_tok=emb, vocab_size=len(vocab),
                               parent_feed=parent_feed, copy=copy)
        self.grammar = grammar
        self.eps, self.dropout, self.max_len = eps, dropout, max_len

    def prepare(self, targets: Sequence[Sequence[str]], srcs: Sequence[Sequence[str]] | None = None) -> SeqBatch:
        B = len(targets)
        width = max(len(t) for t in targets) + 1
        V = len(self.vocab)
        inp = np.zeros((B, width), dtype=np.int64)
        gold = np.zeros((B, width), dtype=np.int64)
        mask = np.zeros((B, width), dtype=bool)
        parents = np.zeros((B, width), dtype=np.int64)
        allowed = np.ones((B, width, V), dtype=bool)
        gold_ext = src_ext = None
        if self.dec.copy:
            L = max(len(s) for s in srcs)
            gold_ext = np.zeros((B, width), dtype=np.int64)
            src_ext = np.full((B, L), -1, dtype=np.int64)
        for b, toks in enumerate(targets):
            ids = self.vocab.ids(toks) + [3]
            n = len(ids)
            inp[b, 0] = 2
            inp[b, 1:n] = ids[:-1]
            gold[b, :n] = ids
            mask[b, :n] = True
            parents[b, :n] = parents_of(list(toks) + [EOS])
            allowed[b, :n] = gold_masks(self.grammar, ids)
            if self.dec.copy:
                oov = oov_table(srcs[b], self.vocab)
                gold_ext[b, :n] = ext_ids(toks, self.vocab, oov) + [3]
                src_ext[b, :len(srcs[b])] = ext_ids(srcs[b], self.vocab, oov)
        return SeqBatch(inp, gold, mask, parents, allowed, gold_ext, src_ext)

    def nll(self, enc: EncodedInput, batch: SeqBatch, *, train=False, rng=None) -> Tensor:
        """Per-example negative log-likelihood (B,), teacher-forced."""
        x = T.dropout(T.embedding(self.E, batch.inp), self.dropout, train, rng)
        xproj = self.dec.project(tok=x)
        s, d_att, logits, gate = self.dec.teacher(xproj, batch.mask, enc.summary, enc, batch.parents,
                                                  dropout=self.dropout, train=train, rng=rng)
        if self.dec.copy:
            per = _copy_nll(logits, batch.allowed, gate, s, batch.gold, batch.gold_ext, batch.src_ext,
                            len(self.vocab), batch.mask)
        else:
            per = T.cross_entropy(logits, batch.gold, self.eps, batch.allowed)
        w = Tensor(batch.mask.astype(per.dtype))
        return T.sum_(per * w, axis=1)

    def greedy(self, enc: EncodedInput, srcs: Sequence[Sequence[str]] | None = None):
        """Greedy decoding; returns per row (tokens or None, log-prob)."""
        B = enc.vectors.shape[0]
        V = len(self.vocab)
        state = enc.summary
        history = [state[0]]
        prev = np.full(B, 2, dtype=np.int64)
        gstate = [self.grammar.start() for _ in range(B)]
        stacks: list[list[int]] = [[] for _ in range(B)]
        out: list[list[str]] = [[] for _ in range(B)]
        logp = np.zeros(B)
        done = np.zeros(B, dtype=bool)
        oovs = src_ext = None
        if self.dec.copy:
            oovs = [oov_table(s, self.vocab) for s in srcs]
            src_ext = np.full(enc.mask.shape, -1, dtype=np.int64)
            for b, s in enumerate(srcs):
                src_ext[b, :len(s)] = ext_ids(s, self.vocab, oovs[b])
        for t in range(1, self.max_len + 2):
            parents_t = [st[-1] if st else 0 for st in stacks]
            xproj = self.dec.project(tok=T.embedding(self.E, prev))
            state, s, _, logits, gate = self.dec.step(xproj, state, enc, history, parents_t)
            history.append(state[0])
            allowed = np.stack([self.grammar.allowed(g) for g in gstate])
            for b in range(B):
                if done[b]:
                    continue
                if self.dec.copy:
                    # the unknown row keeps its mass for the mixture, but is never emitted
                    with_unk = allowed[b].copy()
                    with_unk[1] = True
                    pv = np.exp(T.log_softmax_np(logits.data[b].astype(np.float64), with_unk))
                    dist = copy_distribution(gate.data[b], s.data[b], pv, src_ext[b], V, len(oovs[b]))
                    dist[1] = 0.0
                    dist = dist / dist.sum()
                    k = _pick(dist)
                    logp[b] += float(_np_log(dist[k]))
                    tok = self.vocab.token(k) if k < V else oovs[b][k - V]
                    k_in = k if k < V else 1
                else:
                    m = allowed[b].copy()
                    m[1] = False
                    lp = T.log_softmax_np(logits.data[b].astype(np.float64), m)
                    k = _pick(lp)
                    logp[b] += float(lp[k])
                    tok, k_in = self.vocab.token(k), k
                if k == 3:
                    done[b] = True
                    continue
                out[b].append(tok)
                gstate[b] = self.grammar.advance(gstate[b], k_in)
                if len(tok) > 1 and tok.startswith(OPEN):
                    stacks[b].append(t)
                elif tok == CLOSE and stacks[b]:
                    stacks[b].pop()
                prev[b] = k_in
            if done.all():
                break
        return [(out[b] if done[b] else None, float(logp[b])) for b in range(B)]


# ---------------------------------------------------------------------------
# fine decoder
# ---------------------------------------------------------------------------


@dataclass
class FineBatch:
    tok_in: np.ndarray    # (B, T) token fed at t (BOS / previous slot token)
    vec_in: np.ndarray    # (B, T) flat index b*S + k of the sketch vector fed at t
    use_vec: np.ndarray   # (B, T)
    mask: np.ndarray      # (B, T)
    slot: np.ndarray      # (B, T) positions whose token is predicted
    gold: np.ndarray      # (B, T)
    gold_ext: np.ndarray | None
    src_ext: np.ndarray | None
    allowed: np.ndarray   # (B, T, V)
    parents: np.ndarray   # (B, T)


def template_tokens(template: Sequence[TemplateItem]) -> list[str]:
    return [it.token if it.forced else "?" for it in template]


def sketch_position(item: TemplateItem) -> int:
    return item.link if item.link is not None else item.slot


class FineDecoder:
    """Fills the slots of a sketch template.  Forced positions emit their
    token; the next input after a forced position is the sketch vector of
    the sketch token that determined it, otherwise the embedding of the
    previous token."""

    def __init__(self, params: ParamSet, name: str, vocab: Vocab, kind: str, emb: int, n: int, *,
                 parent_feed: bool, copy: bool = False, eps: float = 0.0, dropout: float = 0.0):
        self.vocab, self.kind = vocab, kind
        self.E = params.add(f"{name}.emb", (len(vocab), emb))
        self.dec = AttnDecoder(params, name, n, n_tok=emb, n_vec=n, vocab_size=len(vocab),
                               parent_feed=parent_feed, copy=copy)
        self.masks = slot_masks(vocab, kind)
        self.eps, self.dropout = eps, dropout

    def _inputs(self, template, b, S, fill_ids):
        """Per-step (token id, vector index, use vector) for row b."""
        tok, vec, use = [], [], []
        for t in range(len(template)):
            if t == 0:
                tok.append(2), vec.append(0), use.append(False)
            elif template[t - 1].forced:
                tok.append(0), vec.append(b * S + sketch_position(template[t - 1])), use.append(True)
            else:
                tok.append(fill_ids[t - 1]), vec.append(0), use.append(False)
        return tok, vec, use

    def prepare(self, templates: Sequence[Sequence[TemplateItem]], golds: Sequence[Sequence[str]],
                sketch_len: int, srcs: Sequence[Sequence[str]] | None = None) -> FineBatch:
        B = len(templates)
        width = max(max(len(t) for t in templates), 1)
        V = len(self.vocab)
        z = lambda dt=np.int64: np.zeros((B, width), dtype=dt)
        tok_in, vec_in, use_vec, gold = z(), z(), z(bool), z()
        mask, slot, parents = z(bool), z(bool), z()
        allowed = np.ones((B, width, V), dtype=bool)
        gold_ext = z() if self.dec.copy else None
        src_ext = None
        if self.dec.copy:
            src_ext = np.full((B, max(len(s) for s in srcs)), -1, dtype=np.int64)
        for b, (tmpl, y) in enumerate(zip(templates, golds)):
            if len(tmpl) != len(y):
                raise NonConformingGold("gold output does not fit the sketch template")
            n = len(tmpl)
            ids = self.vocab.ids(y)
            tk, vc, us = self._inputs(tmpl, b, sketch_len, ids)
            tok_in[b, :n], vec_in[b, :n], use_vec[b, :n] = tk, vc, us
            gold[b, :n] = ids
            mask[b, :n] = True
            parents[b, :n] = parents_of(y)
            for t, it in enumerate(tmpl):
                if it.forced:
                    if it.token != y[t]:
                        raise NonConformingGold(f"position {t}: expected {it.token!r}, got {y[t]!r}")
                else:
                    slot[b, t] = True
                    allowed[b, t] = self.masks[it.slot_type]
            if self.dec.copy:
                oov = oov_table(srcs[b], self.vocab)
                gold_ext[b, :n] = ext_ids(y, self.vocab, oov)
                src_ext[b, :len(srcs[b])] = ext_ids(srcs[b], self.vocab, oov)
        return FineBatch(tok_in, vec_in, use_vec, mask, slot, gold, gold_ext, src_ext, allowed, parents)

    def _xproj(self, sketch_vecs: Tensor, tok_ids, vec_idx, use_vec, train=False, rng=None):
        flat = T.reshape(sketch_vecs, (-1, sketch_vecs.shape[-1]))
        tok = T.dropout(T.embedding(self.E, tok_ids), self.dropout, train, rng)
        return self.dec.project(tok=tok, vec=T.index(flat, vec_idx), use_vec=use_vec)

    def nll(self, enc: EncodedInput, sketch_vecs: Tensor, batch: FineBatch, *, train=False, rng=None) -> Tensor:
        xproj = self._xproj(sketch_vecs, batch.tok_in, batch.vec_in, batch.use_vec, train, rng)
        s, d_att, logits, gate = self.dec.teacher(xproj, batch.mask, enc.summary, enc, batch.parents,
                                                  dropout=self.dropout, train=train, rng=rng)
        if self.dec.copy:
            per = _copy_nll(logits, batch.allowed, gate, s, batch.gold, batch.gold_ext, batch.src_ext,
                            len(self.vocab), batch.slot)
        else:
            per = T.cross_entropy(logits, batch.gold, self.eps, batch.allowed)
        w = Tensor(batch.slot.astype(per.dtype))
        return T.sum_(per * w, axis=1)

    def greedy(self, enc: EncodedInput, sketch_vecs: Tensor, templates: Sequence[Sequence[TemplateItem]],
               srcs: Sequence[Sequence[str]] | None = None):
        """Fill each template; returns per row (tokens, log-prob)."""
        B = len(templates)
        V = len(self.vocab)
        S = sketch_vecs.shape[1]
        width = max(len(t) for t in templates)
        state = enc.summary
        history = [state[0]]
        out: list[list[str]] = [[] for _ in range(B)]
        logp = np.zeros(B)
        prev_ids = np.full(B, 2, dtype=np.int64)
        tmpl_parents = [parents_of(template_tokens(t)) for t in templates]
        oovs = src_ext = None
        if self.dec.copy:
            oovs = [oov_table(s, self.vocab) for s in srcs]
            src_ext = np.full(enc.mask.shape, -1, dtype=np.int64)
            for b, s in enumerate(srcs):
                src_ext[b, :len(s)] = ext_ids(s, self.vocab, oovs[b])
        for t in range(width):
            vec_idx = np.zeros(B, dtype=np.int64)
            use = np.zeros(B, dtype=bool)
            for b, tmpl in enumerate(templates):
                if 0 < t < len(tmpl) and tmpl[t - 1].forced:
                    vec_idx[b] = b * S + sketch_position(tmpl[t - 1])
                    use[b] = True
            xproj = self._xproj(sketch_vecs, prev_ids, vec_idx, use)
            parents_t = [p[t] if t < len(p) else 0 for p in tmpl_parents]
            state, s, _, logits, gate = self.dec.step(xproj, state, enc, history, parents_t)
            history.append(state[0])
            for b, tmpl in enumerate(templates):
                if t >= len(tmpl):
                    continue
                item = tmpl[t]
                if item.forced:
                    out[b].append(item.token)
                    prev_ids[b] = 0
                    continue
                allowed = self.masks[item.slot_type]
                if self.dec.copy:
                    ok = np.array([self.kind != CODE or code_kind(w) == item.slot_type for w in oovs[b]],
                                  dtype=bool)
                    pv = np.exp(T.log_softmax_np(logits.data[b].astype(np.float64), allowed))
                    dist = copy_distribution(gate.data[b], s.data[b], pv, src_ext[b], V, len(oovs[b]))
                    dist[V:][~ok] = 0.0
                    dist[1] = 0.0
                    total = dist.sum()
                    if total <= 0:
                        dist[1], total = 1.0, 1.0
                    dist = dist / total
                    k = _pick(dist)
                    logp[b] += float(_np_log(dist[k]))
                    out[b].append(self.vocab.token(k) if k < V else oovs[b][k - V])
                    prev_ids[b] = k if k < V else 1
                else:
                    m = allowed.copy()
                    m[1] = not (allowed & (np.arange(V) != 1)).any()
                    lp = T.log_softmax_np(logits.data[b].astype(np.float64), m)
                    k = _pick(lp)
                    logp[b] += float(lp[k])
                    out[b].append(self.vocab.token(k))
                    prev_ids[b] = k
        return [(out[b], float(logp[b])) for b in range(B)]


# ---------------------------------------------------------------------------
# SQL heads
# ---------------------------------------------------------------------------


class SketchClassifier:
    def __init__(self, params: ParamSet, name: str, n: int, catalog: Sequence[tuple[str, ...]]):
        if not catalog:
            raise EmptyCatalog("no sketches to classify")
        self.catalog = list(catalog)
        self.index = {c: i for i, c in enumerate(self.catalog)}
        self.lin = Linear(params, name, n, len(self.catalog))

    def logits(self, enc: EncodedInput) -> Tensor:
        return self.lin(enc.summary_vector)

    def distribution(self, enc: EncodedInput) -> np.ndarray:
        return np.exp(T.log_softmax_np(self.logits(enc).data.astype(np.float64)))


def classify_sketch(enc: EncodedInput, classifier: SketchClassifier) -> np.ndarray:
    """Distribution over the sketch catalog for every row (B, |catalog|)."""
    return classifier.distribution(enc)


class SelectHead:
    def __init__(self, params: ParamSet, name: str, n: int, n_agg: int = 6):
        self.agg = Linear(params, f"{name}.agg", n, n_agg)
        self.col = Scorer(params, f"{name}.col", [n, n], SCORER_HIDDEN)

    def logits(self, enc: EncodedInput) -> tuple[Tensor, Tensor]:
        e = enc.summary_vector
        B = e.shape[0]
        col = self.col(T.reshape(e, (B, 1, e.shape[1])), enc.columns)
        return self.agg(e), col


def predict_select(enc: EncodedInput, head: SelectHead) -> tuple[np.ndarray, np.ndarray]:
    """(agg_op distribution (B, 6), agg_col distribution (B, M))."""
    if enc.columns is None or enc.columns.shape[1] == 0:
        raise EmptySchema("no column vectors")
    agg, col = head.logits(enc)
    return (np.exp(T.log_softmax_np(agg.data.astype(np.float64))),
            np.exp(T.log_softmax_np(col.data.astype(np.float64), enc.col_mask)))


@dataclass(frozen=True)
class WhereStep:
    col: int
    op: str
    span: tuple[int, int]


@dataclass
class WhereBatch:
    pool_idx: np.ndarray   # (B, T) index into the input pool
    mask: np.ndarray       # (B, T)
    col_pos: tuple[np.ndarray, np.ndarray]   # (rows, steps) of column predictions
    col_gold: np.ndarray
    span_pos: tuple[np.ndarray, np.ndarray]
    left_gold: np.ndarray
    right_gold: np.ndarray
    op_pos: tuple[np.ndarray, np.ndarray] | None = None
    op_gold: np.ndarray | None = None
    span_rows: np.ndarray | None = None    # (C,) batch row of every gold span
    span_lr: np.ndarray | None = None      # (C, 2)


#: single-stage condition-operator classes; the last one ends the clause
ONESTAGE_OPS = ("=", ">", "<", EOS)


class WhereDecoder:
    """Decodes condition columns and value spans.

    Inputs are n-sized vectors: a start vector, sketch vectors of the
    sketch tokens (operators, ``WHERE``, ``AND``), the chosen column's
    encoding and a projection of the chosen span's end-point encodings.
    In single-stage mode there is no sketch: a learned operator embedding
    replaces the operator's sketch vector, and the operator (or the end of
    the clause) is predicted before each condition.
    """

    def __init__(self, params: ParamSet, name: str, n: int, *, onestage: bool = False,
                 dropout: float = 0.0):
        self.n, self.onestage, self.dropout = n, onestage, dropout
        self.bos = params.add(f"{name}.bos", (1, n))
        self.dec = AttnDecoder(params, name, n, n_vec=n)
        self.col = Scorer(params, f"{name}.col", [n, n], SCORER_HIDDEN)
        self.left = Scorer(params, f"{name}.left", [n, n], SCORER_HIDDEN)
        self.right = Scorer(params, f"{name}.right", [n, n, n], SCORER_HIDDEN)
        self.span = Linear(params, f"{name}.span", 2 * n, n)
        if onestage:
            self.op_emb = params.add(f"{name}.op_emb", (len(ONESTAGE_OPS) - 1, n))
            self.op_out = Linear(params, f"{name}.op_out", n, len(ONESTAGE_OPS))

    # -- teacher forcing ----------------------------------------------------

    def prepare(self, templates, golds, B, S, M, spans) -> WhereBatch:
        """Arrays for teacher forcing.

        Pool layout: [bos | sketch vectors (B*S) | columns (B*M) | gold span
        vectors (one per condition) | operator embeddings (single stage)].
        ``golds`` hold the conditions in sketch order; ``spans`` their
        question spans.
        """
        base_v, base_c = 1, 1 + B * S
        n_spans = sum(len(g) for g in golds)
        base_s = base_c + B * M
        base_o = base_s + n_spans
        seqs, col_rows, col_steps, col_gold = [], [], [], []
        span_rows, span_steps, lefts, rights = [], [], [], []
        op_rows, op_steps, op_gold = [], [], []
        span_lr = []
        k_span = 0
        for b in range(B):
            conds = golds[b]
            seq = [0]
            if self.onestage:
                for j, c in enumerate(conds):
                    op_rows.append(b), op_steps.append(len(seq) - 1), op_gold.append(ONESTAGE_OPS.index(c.op))
                    seq.append(base_o + ONESTAGE_OPS.index(c.op))
                    col_rows.append(b), col_steps.append(len(seq) - 1), col_gold.append(c.col)
                    seq.append(base_c + b * M + c.col)
                    span_rows.append(b), span_steps.append(len(seq) - 1)
                    lefts.append(spans[b][j][0]), rights.append(spans[b][j][1])
                    span_lr.append(spans[b][j])
                    seq.append(base_s + k_span)
                    k_span += 1
                op_rows.append(b), op_steps.append(len(seq) - 1), op_gold.append(len(ONESTAGE_OPS) - 1)
            else:
                tmpl = templates[b]
                j = 0
                for t, item in enumerate(tmpl):
                    if item.forced:
                        nxt = base_v + b * S + item.link
                    elif item.slot_type == COL:
                        c = conds[j]
                        col_rows.append(b), col_steps.append(t), col_gold.append(c.col)
                        nxt = base_c + b * M + c.col
                    else:
                        span_rows.append(b), span_steps.append(t)
                        lefts.append(spans[b][j][0]), rights.append(spans[b][j][1])
                        span_lr.append(spans[b][j])
                        nxt = base_s + k_span
                        k_span += 1
                        j += 1
                    seq.append(nxt)
                seq = seq[:-1] if seq[1:] else seq
                if not tmpl:
                    seq = [0]
            seqs.append(seq)
        width = max(len(s) for s in seqs)
        pool_idx = np.zeros((B, width), dtype=np.int64)
        mask = np.zeros((B, width), dtype=bool)
        for b, s in enumerate(seqs):
            pool_idx[b, :len(s)] = s
            mask[b, :len(s)] = True
        arr = lambda x: np.asarray(x, dtype=np.int64)
        return WhereBatch(pool_idx, mask, (arr(col_rows), arr(col_steps)), arr(col_gold),
                          (arr(span_rows), arr(span_steps)), arr(lefts), arr(rights),
                          (arr(op_rows), arr(op_steps)) if self.onestage else None,
                          arr(op_gold) if self.onestage else None,
                          arr(span_rows), np.asarray(span_lr, dtype=np.int64).reshape(-1, 2))

    def span_vectors(self, E: Tensor, rows, lr) -> Tensor:
        left = T.index(E, (rows, lr[:, 0]))
        right = T.index(E, (rows, lr[:, 1]))
        return T.tanh(self.span(T.concat([left, right], axis=-1)))

    def nll(self, enc: EncodedInput, sketch_vecs: Tensor | None, batch: WhereBatch, *, train=False,
            rng=None) -> Tensor:
        B = enc.vectors.shape[0]
        n = self.n
        parts = [self.bos]
        if sketch_vecs is not None:
            parts.append(T.reshape(sketch_vecs, (-1, n)))
        parts.append(T.reshape(enc.columns, (-1, n)))
        if len(batch.span_rows):
            parts.append(self.span_vectors(enc.vectors, batch.span_rows, batch.span_lr))
        if self.onestage:
            parts.append(self.op_emb)
        pool = T.concat(parts, axis=0)
        x = T.index(pool, batch.pool_idx)
        _, d_att, _, _ = self.dec.teacher(self.dec.project(vec=x), batch.mask, enc.summary, enc,
                                          dropout=self.dropout, train=train, rng=rng)
        total = Tensor(np.zeros(B, dtype=self.bos.dtype))
        if len(batch.col_gold):
            rows, steps = batch.col_pos
            h = T.index(d_att, (rows, steps))
            h3 = T.reshape(h, (len(rows), 1, n))
            cols = T.index(enc.columns, rows)
            sc = self.col(h3, cols)
            col_loss = T.cross_entropy(sc, batch.col_gold, 0.0, enc.col_mask[rows])
            srows, ssteps = batch.span_pos
            hs = T.reshape(T.index(d_att, (srows, ssteps)), (len(srows), 1, n))
            E = T.index(enc.vectors, srows)
            qmask = enc.mask[srows]
            left_sc = self.left(hs, E)
            left_loss = T.cross_entropy(left_sc, batch.left_gold, 0.0, qmask)
            el = T.reshape(T.index(E, (np.arange(len(srows)), batch.left_gold)), (len(srows), 1, n))
            right_sc = self.right(hs, el, E)
            rmask = qmask & (np.arange(qmask.shape[1])[None, :] >= batch.left_gold[:, None])
            right_loss = T.cross_entropy(right_sc, batch.right_gold, 0.0, rmask)
            total = total + _scatter_sum(col_loss, rows, B) + _scatter_sum(left_loss + right_loss, srows, B)
        if self.onestage:
            rows, steps = batch.op_pos
            ol = self.op_out(T.index(d_att, (rows, steps)))
            total = total + _scatter_sum(T.cross_entropy(ol, batch.op_gold), rows, B)
        return total

    # -- greedy -------------------------------------------------------------

    def greedy(self, enc: EncodedInput, sketch_vecs: Tensor | None, templates, ops_list=None):
        """Decode conditions for every row.  With a sketch, ``templates`` fix
        the operators; in single-stage mode operators are predicted.
        Returns per row (list of WhereStep, log-prob)."""
        B = enc.vectors.shape[0]
        n = self.n
        state = enc.summary
        x = T.reshape(T.concat([self.bos] * B, axis=0), (B, n))
        steps: list[list[WhereStep]] = [[] for _ in range(B)]
        logp = np.zeros(B)
        E = enc.vectors.data
        qmask = enc.mask
        cols = enc.columns.data
        if self.onestage:
            phase = ["op"] * B
            pending_op = [None] * B
            done = np.zeros(B, dtype=bool)
            max_t = 3 * MAX_CONDS + 1
        else:
            pos = [0] * B
            done = np.array([len(t) == 0 for t in templates])
            max_t = max((len(t) for t in templates), default=0)
            ops_iter = [list(o) for o in ops_list]
        pending_col = [None] * B
        for t in range(max_t):
            if done.all():
                break
            state, _, d_att, _, _ = self.dec.step(self.dec.project(vec=x), state, enc)
            h = d_att.data
            nxt = np.zeros((B, n), dtype=x.dtype)
            for b in range(B):
                if done[b]:
                    continue
                kind = None
                if self.onestage:
                    kind = phase[b]
                else:
                    item = templates[b][pos[b]]
                    kind = "forced" if item.forced else ("col" if item.slot_type == COL else "span")
                if kind == "forced":
                    nxt[b] = sketch_vecs.data[b, item.link]
                elif kind == "op":
                    lo = T.log_softmax_np(self.op_out(Tensor(h[b:b + 1])).data[0].astype(np.float64))
                    if len(steps[b]) >= MAX_CONDS:
                        lo = np.where(np.arange(len(lo)) == len(lo) - 1, 0.0, -np.inf)
                    k = _pick(lo)
                    logp[b] += lo[k]
                    if k == len(ONESTAGE_OPS) - 1:
                        done[b] = True
                        continue
                    pending_op[b] = ONESTAGE_OPS[k]
                    nxt[b] = self.op_emb.data[k]
                    phase[b] = "col"
                elif kind == "col":
                    M = int(enc.col_mask[b].sum())
                    sc = self.col(Tensor(h[b:b + 1][None]), Tensor(cols[b:b + 1, :M])).data[0]
                    lc = T.log_softmax_np(sc.astype(np.float64))
                    k = _pick(lc)
                    logp[b] += lc[k]
                    pending_col[b] = k
                    nxt[b] = cols[b, k]
                    if self.onestage:
                        phase[b] = "span"
                else:
                    L = int(qmask[b].sum())
                    Eb = Tensor(E[b:b + 1, :L])
                    hb = Tensor(h[b:b + 1][None])
                    ls = T.log_softmax_np(self.left(hb, Eb).data[0].astype(np.float64))
                    l = _pick(ls)
                    el = Tensor(E[b:b + 1, l:l + 1])
                    rs = self.right(hb, el, Eb).data[0].astype(np.float64)
                    rs = T.log_softmax_np(rs, np.arange(L) >= l)
                    r = _pick(rs)
                    logp[b] += ls[l] + rs[r]
                    op = pending_op[b] if self.onestage else ops_iter[b].pop(0)
                    steps[b].append(WhereStep(pending_col[b], op, (l, r)))
                    sv = self.span_vectors(Tensor(E[b:b + 1]), np.array([0]), np.array([[l, r]]))
                    nxt[b] = sv.data[0]
                    if self.onestage:
                        phase[b] = "op"
                if not self.onestage:
                    pos[b] += 1
                    if pos[b] >= len(templates[b]):
                        done[b] = True
            x = Tensor(nxt)
        return [(steps[b], float(logp[b])) for b in range(B)]


def _scatter_sum(values: Tensor, rows: np.ndarray, B: int) -> Tensor:
    """Sum ``values`` (N,) into per-row totals (B,)."""
    onehot = np.zeros((len(rows), B), dtype=values.dtype)
    onehot[np.arange(len(rows)), rows] = 1.0
    return T.reshape(T.matmul(T.reshape(values, (1, len(rows))), Tensor(onehot)), (B,))


def decode_where(enc: EncodedInput, decoder: WhereDecoder, sketch: Sketch, sketch_vecs: Tensor | None):
    """Single-example WHERE decoding under ``sketch``."""
    from .sketch import expand_template, sketch_ops

    tmpl = expand_template(sketch)
    steps, _ = decoder.greedy(enc, sketch_vecs, [tmpl], [sketch_ops(sketch)])[0]
    return steps
