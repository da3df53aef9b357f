"""Bias-corrected Adam."""

import numpy as np

from .tensor import AutodiffError, Tensor


class AdamState:
    """Per-parameter moment buffers plus the shared step counter."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.99, epsilon=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moment = [np.zeros(p.shape) for p in params]
        self.second_moment = [np.zeros(p.shape) for p in params]


def adam_step(params, grads, state):
    """Apply one in-place Adam update; returns the params and state."""
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    arrays = []
    for p, g in zip(params, grads):
        ga = np.zeros(p.shape) if g is None else np.asarray(g.data if isinstance(g, Tensor) else g)
        if ga.shape != p.shape:
            raise ValueError(f"gradient shape {ga.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(ga)):
            raise AutodiffError("NaN/Inf gradient passed to adam_step; aborting update")
        arrays.append(ga)

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, arrays, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


class Adam:
    """Object wrapper around :func:`adam_step` bound to a parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.99, epsilon=1e-8):
        self.params = list(params)
        self.state = AdamState(self.params, lr, beta1, beta2, epsilon)

    def step(self, grads):
        adam_step(self.params, grads, self.state)
