"""Adam optimizer over named parameter dicts."""

from __future__ import annotations

import numpy as np


class TrainingDiverged(RuntimeError):
    """Raised on NaN/Inf gradients or loss; names the offending tensor."""


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(params: dict, grads: dict, state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for {name!r} "
                                   f"at step {state.t}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
