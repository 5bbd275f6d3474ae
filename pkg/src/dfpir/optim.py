"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def _array(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else np.asarray(p)


@dataclass
class OptimState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-4

    @classmethod
    def for_params(cls, params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "OptimState":
        data = [_array(p) for p in params]
        return cls([np.zeros_like(d) for d in data], [np.zeros_like(d) for d in data],
                   0, beta1, beta2, eps, lr)

    def validate(self, params) -> None:
        if self.step < 0:
            raise ValueError("optimizer step must be >= 0")
        if len(self.m) != len(params) or len(self.v) != len(params):
            raise ValueError(f"optimizer state holds {len(self.m)} moments for {len(params)} parameters")
        for p, m, v in zip(params, self.m, self.v):
            if m.shape != p.shape or v.shape != p.shape:
                raise ValueError(f"moment shape {m.shape} does not match parameter {p.shape}")


def adam_step(params, grads, state: OptimState) -> None:
    """One in-place update. ``params`` are arrays (or Tensors); a None grad counts as zero."""
    arrays = [_array(p) for p in params]
    state.validate(arrays)
    if len(grads) != len(arrays):
        raise ValueError(f"{len(grads)} gradients for {len(arrays)} parameters")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= (state.lr * update).astype(p.dtype)
