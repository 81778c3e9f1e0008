"""Adam with per-epoch exponential learning-rate decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .errors import OptimizationError
from .tensor import Tensor

LR_DECAY = 0.95


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, grads: Mapping[str, np.ndarray] = None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    ``grads`` defaults to each tensor's ``.grad``; a missing grad counts as zero.
    Every gradient is validated before any parameter moves.
    """
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    checked = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise OptimizationError(f"gradient shape {g.shape} != parameter shape {p.shape}", name)
        if not np.isfinite(g).all():
            raise OptimizationError(f"non-finite gradient for parameter {name!r}", name)
        checked[name] = g

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = checked[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def lr_decay(state: AdamState, factor: float = LR_DECAY) -> AdamState:
    state.lr *= factor
    return state
