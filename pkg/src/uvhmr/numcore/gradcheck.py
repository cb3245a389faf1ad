"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .engine import Tape, Tensor


def finite_difference_check(fn, inputs, h=1e-5):
    """Compare analytic gradients of a scalar fn against central differences.

    fn takes len(inputs) Tensors and returns a scalar Tensor.  Returns the
    worst relative error max|g_a - g_n| / max(1, |g_a|, |g_n|) over all
    input elements; the denominator floor of 1 makes the comparison an
    absolute one for near-zero gradients.
    """
    tensors = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = fn(*tensors)
    grads = tape.gradients(out)
    worst = 0.0
    for t in tensors:
        ga = grads.get(t)
        if ga is None:
            ga = np.zeros_like(t.data)
        gn = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gn_flat = gn.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(*tensors).item()
            flat[i] = orig - h
            down = fn(*tensors).item()
            flat[i] = orig
            gn_flat[i] = (up - down) / (2.0 * h)
        denom = np.maximum(1.0, np.maximum(np.abs(ga), np.abs(gn)))
        err = float(np.max(np.abs(ga - gn) / denom)) if flat.size else 0.0
        worst = max(worst, err)
    return worst
