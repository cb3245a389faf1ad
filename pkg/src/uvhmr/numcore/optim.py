"""Adam optimizer over named parameter dicts.

Parameters live in an ordered dict[str, Tensor]; moment buffers are plain
numpy arrays keyed by the same names, so optimizer state serializes with
the same machinery as the parameters themselves.
"""

from __future__ import annotations

import numpy as np

from .engine import Tensor


class AdamState:
    """Per-parameter first/second moment buffers plus the step counter."""

    def __init__(self, params, lr=2.5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params, grads, state):
    """One in-place Adam update.

    params: dict[str, Tensor]; grads: dict mapping Tensor -> ndarray (as
    returned by Tape.gradients) or dict[str, ndarray].  Parameters absent
    from grads are skipped.  Non-finite gradients raise, naming the
    parameter, before any parameter is touched.
    """
    by_name = {}
    for name, p in params.items():
        if name in grads:
            g = grads[name]
        elif p in grads:
            g = grads[p]
        else:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                "adam_step: non-finite gradient for parameter %r" % name
            )
        by_name[name] = g

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, g in by_name.items():
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
