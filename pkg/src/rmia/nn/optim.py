"""AdamW with decoupled weight decay, moments kept on the ParameterStore."""

from __future__ import annotations

import numpy as np

from .ops import ShapeMismatch
from .params import ParameterStore


def adamw_step(store: ParameterStore, grads: dict, lr: float, weight_decay: float = 0.0,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> ParameterStore:
    """One in-place AdamW update over the whole registry.

    Decay is applied only to parameters flagged decayable (weights and
    embedding tables).  Missing gradients count as zero.
    """
    b1, b2 = betas
    store.step += 1
    t = store.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in store.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = store.m.get(name)
        if m is None:
            m = store.m[name] = np.zeros_like(p)
            store.v[name] = np.zeros_like(p)
        v = store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if weight_decay and store.decayable(name):
            p *= 1.0 - lr * weight_decay
        p -= (lr / c1) * m / (np.sqrt(v / c2) + eps)
    return store
