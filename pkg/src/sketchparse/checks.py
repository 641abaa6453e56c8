"""Finite-difference checks per operation family and per full training loss,
shared by the ``gradcheck`` subcommand and the test suite.  Everything runs
in float64."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .config import TrainConfig
from .data import build_vocabs
from .decoders import _copy_nll
from .model import Parser
from .nn import layers as L
from .nn import tensor as T
from .nn.gradcheck import grad_check
from .nn.params import ParamSet
from .nn.tensor import Tensor

TOLERANCE = 1e-4
WEIGHT_SCALE = 6.0


def _param(rng, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _op_checks(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    B, Ln, n, V = 2, 4, 3, 5
    out = {}

    a, b = _param(rng, B, n), _param(rng, B, n)
    out["elementwise"] = (lambda: T.sum_(T.tanh(a) * T.sigmoid(b) + T.exp(a * 0.3) - a * b
                                         + T.log(T.sigmoid(a) + 1.0)), [a, b])

    x, w = _param(rng, B, Ln, n), _param(rng, n, V)
    out["matmul+reshape"] = (lambda: T.sum_(T.tanh(T.reshape(T.matmul(x, w), (B, -1))) * 1.7), [x, w])

    E = _param(rng, V, n)
    ids = rng.integers(0, V, size=(B, Ln))
    out["embedding"] = (lambda: T.sum_(T.tanh(T.embedding(E, ids))), [E])

    ps = ParamSet(np.float64, seed=int(rng.integers(1 << 30)))
    lstm = L.LSTM(ps, "l", n, 4)
    seq = _param(rng, B, Ln, n)
    mask = np.ones((B, Ln), dtype=bool)
    mask[1, 2:] = False
    bi = L.BiLSTM(ps, "b", n, 4)
    out["lstm"] = (lambda: T.sum_(T.tanh(T.stack(lstm.run(seq, mask)[0], axis=1))),
                   [seq] + [ps[k] for k in ps.names() if k.startswith("l.")])

    def _bilstm():
        states, h, c = bi(seq, mask)
        return T.sum_(T.tanh(states) * 0.5) + T.sum_(h * c)
    out["bilstm"] = (_bilstm, [seq] + [ps[k] for k in ps.names() if k.startswith("b.")])

    q, k = _param(rng, B, 2, n), _param(rng, B, Ln, n)
    W1, W2 = _param(rng, n, n), _param(rng, n, n)

    def _attn():
        wts, ctx = L.attention(q, k, mask)
        return T.sum_(L.attended_output(q, ctx, W1, W2)) + T.sum_(wts * wts)
    out["attention"] = (_attn, [q, k, W1, W2])

    logits = _param(rng, B, Ln, V)
    tgt = rng.integers(0, V, size=(B, Ln))
    allowed = rng.random((B, Ln, V)) < 0.7
    allowed[np.arange(B)[:, None], np.arange(Ln)[None, :], tgt] = True
    out["cross_entropy"] = (lambda: T.sum_(T.cross_entropy(logits, tgt, 0.1, allowed)), [logits])

    gate_in, s_in = _param(rng, B, Ln), _param(rng, B, Ln, 6)
    src_ext = np.array([[0, V, 4, V + 1, V, -1], [V, 2, 3, 1, -1, -1]])
    gold_ext = np.array([[V, 4, V + 1, 1], [V, 2, 1, 1]])
    gold = np.where(gold_ext >= V, 1, gold_ext)
    allowed[np.arange(B)[:, None], np.arange(Ln)[None, :], gold] = True
    weight = np.ones((B, Ln), dtype=bool)
    weight[1, 3] = False
    src_mask = src_ext >= 0

    def _copy():
        s = T.softmax(s_in, np.broadcast_to(src_mask[:, None, :], s_in.shape))
        return T.sum_(_copy_nll(logits, allowed, T.sigmoid(gate_in), s, gold, gold_ext, src_ext, V, weight))
    out["copy"] = (_copy, [logits, gate_in, s_in])

    sc_ps = ParamSet(np.float64, seed=int(rng.integers(1 << 30)))
    scorer = L.Scorer(sc_ps, "s", [n, n], 4)
    qv, cols = _param(rng, B, 1, n), _param(rng, B, Ln, n)
    out["scorer"] = (lambda: T.sum_(T.tanh(scorer(qv, cols))), [qv, cols] + list(sc_ps))
    return out


def operation_errors(seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per operation family."""
    rng = np.random.default_rng(seed)
    return {name: grad_check(f, ps, seed=seed) for name, (f, ps) in _op_checks(rng).items()}


def _tiny(kind: str, seed: int, **flags) -> tuple[Parser, list]:
    from .toy import code_corpus, lambda_corpus, sql_corpus
    if kind == "lambda":
        data, tgt_min = lambda_corpus(seed)[:3], None
    elif kind == "code":
        data, tgt_min = code_corpus(8, seed), 2
    else:
        data, tgt_min = sql_corpus(3, 4, seed)[0][:3], None
        data = [ex for ex in data if ex.spans is not None]
    cfg = TrainConfig(kind=kind, n=8, emb=6, dropout=0.0, seed=seed, scorer_hidden=4,
                      tgt_min_freq=tgt_min, **flags)
    model = Parser(cfg, build_vocabs(data, 1, tgt_min), dtype=np.float64)
    # larger weights keep gradients well above finite-difference round-off
    for p in model.params:
        p.data *= WEIGHT_SCALE
    return model, data[:2]


LOSS_FAMILIES = {
    "lambda coarse": ("lambda", {}, 0),
    "lambda fine": ("lambda", {}, 1),
    "lambda onestage": ("lambda", {"onestage": True}, 1),
    "code fine (copy)": ("code", {}, 1),
    "code onestage (copy)": ("code", {"onestage": True}, 1),
    "sql sketch classifier": ("sql", {}, 0),
    "sql select+where": ("sql", {}, 1),
    "sql onestage": ("sql", {"onestage": True}, 1),
}


def loss_errors(seed: int = 0, max_entries: int = 3) -> dict[str, float]:
    """Max relative error of each full teacher-forced loss term, probing
    ``max_entries`` random entries of every parameter."""
    out = {}
    for name, (kind, flags, term) in LOSS_FAMILIES.items():
        model, data = _tiny(kind, seed, **flags)
        f = lambda: T.sum_(model.loss_terms(data)[term])
        out[name] = grad_check(f, list(model.params), max_entries=max_entries, seed=seed)
    return out
