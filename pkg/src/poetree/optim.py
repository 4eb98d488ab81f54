"""Adam over dictionaries of numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:
    """Return updated copies of ``params``; ``state`` is advanced in place and returned."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    out = {}
    for key, value in params.items():
        g = grads[key]
        if g.shape != value.shape:
            raise ValueError(f"gradient for {key!r} has shape {g.shape}, parameter {value.shape}")
        if key not in state.m:
            state.m[key] = np.zeros_like(value)
            state.v[key] = np.zeros_like(value)
        m = state.m[key]
        v = state.v[key]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        out[key] = value - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return out, state
