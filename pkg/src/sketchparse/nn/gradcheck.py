"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from ..errors import NonFinite
from .tensor import Tape, Tensor, no_grad

#: denominators below this are clamped, so near-zero gradients are judged
#: by absolute error (|a - n| < ABS_FLOOR * tol)
ABS_FLOOR = 1e-5


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), ABS_FLOOR)


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients of ``f()`` and central
    differences ``(f(θ+h) - f(θ-h)) / 2h`` over the entries of ``params``.

    ``f`` must be deterministic.  With ``max_entries`` only a random subset
    of each parameter's entries is probed.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.grad = None

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            old = flat[i]
            with no_grad():
                flat[i] = old + h
                up = float(f().data)
                flat[i] = old - h
                down = float(f().data)
            flat[i] = old
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFinite(f"loss not finite around {p.name}[{i}]")
            num = (up - down) / (2 * h)
            worst = max(worst, float(relative_error(np.float64(g.reshape(-1)[i]), np.float64(num))))
    if not np.isfinite(worst):
        raise NonFinite("gradient")
    return worst
