"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every node created while it is active, so creation
order is already a topological order; ``Tape.backward`` walks it in reverse
and calls each node's backward closure exactly once.  Outside a tape, ops
only compute values.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import NonFinite, ShapeMismatch, TargetOutOfRange

_local = threading.local()


def current_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ShapeMismatch("backward needs a scalar loss")
        if not np.isfinite(loss.data).all():
            raise NonFinite(f"loss is {loss.data}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            node._backward()
        self.nodes = []


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(None)

    def __exit__(self, *exc):
        _local.stack.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward: Callable[[], None] = _noop
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None):
        return sum_(self, axis)


def _noop():
    pass


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    tape = current_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)

    def run():
        if out.grad is not None:
            backward(out.grad)

    out._backward = run
    tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a)

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a)

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: _accum(a, -g))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: _accum(a, g * (1.0 - y * y)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _node(y, (a,), lambda g: _accum(a, g * y * (1.0 - y)))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: _accum(a, g * y))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: _accum(a, g / a.data))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                _accum(b, a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), back)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _node(np.swapaxes(a.data, ax1, ax2), (a,),
                 lambda g: _accum(a, np.swapaxes(g, ax1, ax2)))


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)))


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = list(ts)
    ax = axis % ts[0].ndim
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def back(g):
        for t, part in zip(ts, np.split(g, sizes, axis=ax)):
            _accum(t, part)

    return _node(np.concatenate([t.data for t in ts], axis=ax), ts, back)


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(ts)

    def back(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                _accum(t, np.take(g, i, axis=axis))

    return _node(np.stack([t.data for t in ts], axis=axis), ts, back)


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def index(a: Tensor, idx) -> Tensor:
    """``a[idx]``; advanced indices may repeat (gradients are summed)."""
    basic = _is_basic(idx)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _accum(a, full)

    return _node(a.data[idx], (a,), back)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    return index(weight, ids)


def sum_(a: Tensor, axis=None) -> Tensor:
    def back(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _node(np.asarray(a.data.sum(axis=axis)), (a,), back)


# ---------------------------------------------------------------------------
# fused network pieces
# ---------------------------------------------------------------------------


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked-out entries get probability 0."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        _accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _node(y, (x,), back)


def log_softmax_np(z: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Value-only log-softmax; masked entries come out as -inf."""
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets, eps: float = 0.0, mask: np.ndarray | None = None) -> Tensor:
    """Per-row cross-entropy against a label-smoothed target distribution.

    The target keeps ``1 - eps`` of the mass and spreads ``eps`` evenly over
    the other allowed classes (``mask``), so ``eps=0`` is plain NLL.
    Returns one loss per row, shaped ``logits.shape[:-1]``.
    """
    z = logits.data
    K = z.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != z.shape[:-1]:
        raise ShapeMismatch(f"targets {targets.shape} vs logits {z.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= K):
        raise TargetOutOfRange(f"targets must lie in [0, {K})")
    if not 0.0 <= eps < 1.0:
        raise ValueError("smoothing must be in [0, 1)")
    allowed = np.ones(z.shape, dtype=bool) if mask is None else np.broadcast_to(mask, z.shape)
    tgt_onehot = np.zeros(z.shape, dtype=z.dtype)
    np.put_along_axis(tgt_onehot, targets[..., None], 1.0, axis=-1)
    if not np.all(allowed[tgt_onehot.astype(bool)]):
        raise TargetOutOfRange("target outside the allowed classes")
    logp = log_softmax_np(z, allowed)
    if eps > 0:
        n_other = allowed.sum(axis=-1, keepdims=True) - 1
        spread = np.where(n_other > 0, eps / np.maximum(n_other, 1), 0.0).astype(z.dtype)
        keep = np.where(n_other > 0, 1.0 - eps, 1.0).astype(z.dtype)
        q = np.where(allowed, spread, 0.0) * (1 - tgt_onehot) + keep * tgt_onehot
    else:
        q = tgt_onehot
    loss = -(q * np.where(allowed, logp, 0.0)).sum(axis=-1)
    p = np.exp(logp)

    def back(g):
        _accum(logits, g[..., None] * (p - q))

    return _node(loss, (logits,), back)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the identity at evaluation time or for rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not train or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


def lstm_cell(xproj: Tensor, h: Tensor, c: Tensor, w_h: Tensor,
              step_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """One LSTM step given the precomputed input projection ``x W_x + b``.

    Gate order is input, forget, output, candidate.  Rows whose
    ``step_mask`` is 0 carry their previous state through unchanged.
    """
    H = h.shape[-1]
    if xproj.shape[-1] != 4 * H or w_h.shape != (H, 4 * H):
        raise ShapeMismatch(f"lstm: xproj {xproj.shape}, h {h.shape}, W_h {w_h.shape}")
    z = xproj.data + h.data @ w_h.data
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    o = _sigmoid(z[:, 2 * H:3 * H])
    gg = np.tanh(z[:, 3 * H:])
    c_new = f * c.data + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    if step_mask is not None:
        m = step_mask.astype(h.dtype)[:, None]
        h_out = m * h_new + (1 - m) * h.data
        c_out = m * c_new + (1 - m) * c.data
    else:
        m = None
        h_out, c_out = h_new, c_new

    parents = (xproj, h, c, w_h)
    tape = current_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(h_out), Tensor(c_out)

    hT = Tensor(h_out, requires_grad=True)
    cT = Tensor(c_out, requires_grad=True)
    joint = Tensor(np.empty(0), requires_grad=True)

    def back():
        if hT.grad is None and cT.grad is None:
            return
        gh = hT.grad if hT.grad is not None else np.zeros_like(h_out)
        gc = cT.grad if cT.grad is not None else np.zeros_like(c_out)
        if m is not None:
            gh_new, gc_in = m * gh, m * gc
        else:
            gh_new, gc_in = gh, gc
        gc_new = gc_in + gh_new * o * (1.0 - tc * tc)
        dz = np.concatenate([
            gc_new * gg * i * (1.0 - i),
            gc_new * c.data * f * (1.0 - f),
            gh_new * tc * o * (1.0 - o),
            gc_new * i * (1.0 - gg * gg),
        ], axis=1)
        _accum(xproj, dz)
        if h.requires_grad:
            dh = dz @ w_h.data.T
            if m is not None:
                dh = dh + (1 - m) * gh
            _accum(h, dh)
        if c.requires_grad:
            dc = gc_new * f
            if m is not None:
                dc = dc + (1 - m) * gc
            _accum(c, dc)
        if w_h.requires_grad:
            _accum(w_h, h.data.T @ dz)

    joint._backward = back
    tape.nodes.append(joint)
    return hT, cT


def check_finite(*arrays: np.ndarray, what: str = "value") -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFinite(f"non-finite {what}")


def softmax_nll_smoothed(logits: Tensor, target, eps: float, K: int | None = None) -> Tensor:
    """Label-smoothed negative log-likelihood over ``K`` classes (scalar for
    a single row of logits, one value per row otherwise)."""
    if K is not None and K != logits.shape[-1]:
        raise ShapeMismatch(f"K={K} but logits have {logits.shape[-1]} classes")
    return cross_entropy(logits, target, eps)
