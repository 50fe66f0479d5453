"""Adam optimizer operating in place on named parameter tensors."""
from __future__ import annotations

import numpy as np

from .autodiff import NumericError, ShapeError, Tensor


class AdamState:
    """First/second moment estimates and the step counter for Adam."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState):
    """Apply one bias-corrected Adam update to ``params`` in place.

    ``grads`` is keyed like ``params``; a missing key counts as a zero
    gradient. Returns ``(params, state)`` for convenience.
    """
    if state.lr <= 0:
        raise ValueError(f"learning rate must be positive, got {state.lr}")
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if g.shape != params[k].shape:
            raise ShapeError(f"adam_step: gradient for {k!r} has shape {g.shape}, "
                             f"parameter has {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for {k!r}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype, copy=False)
    return params, state
