from __future__ import annotations

import numpy as np

from ..errors import NonFinite, ShapeMismatch
from .params import ParamSet


def rmsprop_step(param: np.ndarray, grad: np.ndarray, acc: np.ndarray, lr: float,
                 rho: float = 0.95, eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Return the updated (param, accumulator) pair; inputs are not modified."""
    if not (param.shape == grad.shape == acc.shape):
        raise ShapeMismatch(f"rmsprop: {param.shape}, {grad.shape}, {acc.shape}")
    acc = rho * acc + (1.0 - rho) * grad * grad
    return param - lr * grad / np.sqrt(acc + eps), acc


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if not np.isfinite(norm):
        raise NonFinite("gradient norm")
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}
    return grads, norm


class RMSProp:
    def __init__(self, params: ParamSet, lr: float, rho: float = 0.95, eps: float = 1e-8,
                 clip: float | None = 5.0):
        self.params = params
        self.lr, self.rho, self.eps, self.clip = lr, rho, eps, clip
        self.acc = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.steps = 0

    def step(self) -> float:
        """Apply one update from the accumulated gradients; returns the pre-clip norm."""
        grads, norm = clip_by_global_norm(self.params.grads(), self.clip)
        dt = self.params.dtype
        for name, p in self.params.items():
            new, acc = rmsprop_step(p.data, grads[name], self.acc[name],
                                    dt.type(self.lr), dt.type(self.rho), dt.type(self.eps))
            p.data = new.astype(dt, copy=False)
            self.acc[name] = acc.astype(dt, copy=False)
        self.params.zero_grad()
        self.steps += 1
        return norm

    def state(self) -> dict:
        return {"kind": "rmsprop", "lr": self.lr, "rho": self.rho, "eps": self.eps,
                "clip": self.clip, "steps": self.steps, "acc": dict(self.acc)}

    def load_state(self, header: dict, accs: dict[str, np.ndarray]) -> None:
        self.steps = int(header.get("steps", 0))
        for n in self.acc:
            if n in accs:
                self.acc[n] = accs[n].astype(self.params.dtype)
