"""Network building blocks over a :class:`ParamSet`.

Weight matrices are stored input-major (``x @ W``).  Batched sequences are
right-padded ``(B, T, d)`` arrays with a boolean ``(B, T)`` mask.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import EmptySequence, ShapeMismatch
from . import tensor as T
from .params import ParamSet
from .tensor import Tensor


class Linear:
    def __init__(self, params: ParamSet, name: str, n_in: int, n_out: int, bias: bool = True):
        self.W = params.add(f"{name}.W", (n_in, n_out))
        self.b = params.add(f"{name}.b", (n_out,), init="zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.W)
        return y + self.b if self.b is not None else y


class LSTM:
    """Single-layer LSTM; ``W_x``/``b`` are applied to the whole input
    sequence at once, the recurrent part step by step."""

    def __init__(self, params: ParamSet, name: str, n_in: int, hidden: int):
        self.hidden = hidden
        self.W_x = params.add(f"{name}.W_x", (n_in, 4 * hidden))
        self.W_h = params.add(f"{name}.W_h", (hidden, 4 * hidden))
        self.b = params.add(f"{name}.b", (4 * hidden,), init="zeros")

    def project(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.W_x) + self.b

    def step(self, xproj: Tensor, h: Tensor, c: Tensor, mask=None) -> tuple[Tensor, Tensor]:
        return T.lstm_cell(xproj, h, c, self.W_h, mask)

    def zeros(self, batch: int, dtype) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.hidden), dtype=dtype)
        return Tensor(z), Tensor(z.copy())

    def run(self, x: Tensor, mask: np.ndarray | None = None, reverse: bool = False,
            state: tuple[Tensor, Tensor] | None = None):
        """Run over ``x`` (B, T, d).  Returns (per-step hidden states in
        input order, final (h, c))."""
        B, steps = x.shape[0], x.shape[1]
        if steps == 0:
            raise EmptySequence("LSTM over an empty sequence")
        xp = self.project(x)
        h, c = state if state is not None else self.zeros(B, x.dtype)
        order = range(steps - 1, -1, -1) if reverse else range(steps)
        hs: list[Tensor] = [None] * steps
        for t in order:
            m = None if mask is None else mask[:, t]
            h, c = self.step(xp[:, t], h, c, m)
            hs[t] = h
        return hs, (h, c)


def lstm_step(state: tuple[Tensor, Tensor], x: Tensor, cell: LSTM) -> tuple[Tensor, Tensor]:
    """Advance ``cell`` by one input vector batch ``x`` (B, d)."""
    if x.shape[-1] != cell.W_x.shape[0]:
        raise ShapeMismatch(f"input size {x.shape[-1]} != {cell.W_x.shape[0]}")
    h, c = state
    return cell.step(cell.project(x), h, c)


class BiLSTM:
    """Bidirectional LSTM whose concatenated states have size ``n``."""

    def __init__(self, params: ParamSet, name: str, n_in: int, n: int):
        if n % 2:
            raise ValueError("bidirectional size must be even")
        self.n = n
        self.fwd = LSTM(params, f"{name}.fwd", n_in, n // 2)
        self.bwd = LSTM(params, f"{name}.bwd", n_in, n // 2)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None):
        """Returns (states (B, T, n), summary h, summary c) where the summary
        is [forward state at the last token, backward state at the first]."""
        hf, (hF, cF) = self.fwd.run(x, mask)
        hb, (hB, cB) = self.bwd.run(x, mask, reverse=True)
        states = T.concat([T.stack(hf, axis=1), T.stack(hb, axis=1)], axis=-1)
        return states, T.concat([hF, hB], axis=-1), T.concat([cF, cB], axis=-1)


def bilstm_encode(seq: Sequence[Tensor] | Tensor, enc: BiLSTM, mask=None):
    """Encode a sequence of vectors (list of (d,) or a (B, T, d) batch)."""
    if isinstance(seq, Tensor):
        x = seq
    else:
        if len(seq) == 0:
            raise EmptySequence("empty input sequence")
        x = T.reshape(T.stack(list(seq), axis=0), (1, len(seq), -1))
    if x.shape[1] == 0:
        raise EmptySequence("empty input sequence")
    return enc(x, mask)


def attention(query: Tensor, keys: Tensor, key_mask: np.ndarray | None = None):
    """Dot-product attention.

    ``query`` (B, Tq, n) against ``keys`` (B, L, n); returns weights
    (B, Tq, L), normalized over valid keys, and contexts (B, Tq, n).
    """
    if query.shape[-1] != keys.shape[-1]:
        raise ShapeMismatch(f"query size {query.shape[-1]} != key size {keys.shape[-1]}")
    scores = T.matmul(query, T.swapaxes(keys, 1, 2))
    mask = None if key_mask is None else key_mask[:, None, :]
    weights = T.softmax(scores, mask)
    return weights, T.matmul(weights, keys)


def attended_output(d: Tensor, context: Tensor, W1: Tensor, W2: Tensor) -> Tensor:
    """tanh(d W1 + context W2)."""
    if d.shape[-1] != W1.shape[0] or context.shape[-1] != W2.shape[0]:
        raise ShapeMismatch("attended_output input sizes")
    return T.tanh(T.matmul(d, W1) + T.matmul(context, W2))


class Scorer:
    """Scoring network w3 . tanh(W4 [x_1, ..., x_k] + b4).

    The input is given as parts; ``W4`` is stored split per part so parts
    may broadcast against each other (e.g. one query against M columns).
    """

    def __init__(self, params: ParamSet, name: str, sizes: Sequence[int], hidden: int):
        self.W4 = [params.add(f"{name}.W4_{i}", (s, hidden)) for i, s in enumerate(sizes)]
        self.b4 = params.add(f"{name}.b4", (hidden,), init="zeros")
        self.w3 = params.add(f"{name}.w3", (hidden, 1))

    def __call__(self, *parts: Tensor) -> Tensor:
        if len(parts) != len(self.W4):
            raise ShapeMismatch("wrong number of scorer inputs")
        z = self.b4
        for x, W in zip(parts, self.W4):
            z = z + T.matmul(x, W)
        s = T.matmul(T.tanh(z), self.w3)
        return T.reshape(s, s.shape[:-1])
