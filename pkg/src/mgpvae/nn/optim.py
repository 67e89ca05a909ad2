"""Adam with global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NumericalError
from .params import ParamLayout


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step)


def clip_by_global_norm(grads: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.sqrt(np.sum(grads * grads)))
    if max_norm is not None and norm > max_norm:
        return grads * (max_norm / norm), norm
    return grads, norm


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              clip_norm: float | None = 100.0, layout: ParamLayout | None = None):
    """One Adam *descent* step on ``params``; returns ``(params, state, grad_norm)``.

    Gradients are clipped to global norm ``clip_norm`` before the moment update.
    """
    grads = np.asarray(grads, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        name = layout.segment_at(int(bad[0])).name if layout is not None else f"index {bad[0]}"
        raise NumericalError(f"non-finite gradient in parameter segment {name}", segment=name)
    grads, norm = clip_by_global_norm(grads, clip_norm)
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t), norm
