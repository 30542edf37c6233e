"""Adam with bias correction, operating in place on parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shapes: list[tuple[int, ...]] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
            shapes=[p.shape for p in params],
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update. Mutates ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment slots"
        )
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ValueError(f"adam_step: shape mismatch {p.shape} / {np.shape(g)} / {m.shape}")
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step_count
    bc2 = 1.0 - b2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
