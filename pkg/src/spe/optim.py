"""Adam with bias correction and batch-normalized global gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Parameter


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Parameter], grads: Mapping[str, np.ndarray], state: AdamState
) -> AdamState:
    """Apply one Adam update in place. Parameters without a gradient entry are left alone."""
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        m = state.m.get(name)
        if m is None:
            # float64 moments: squared float32 gradients underflow to slow subnormals
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return state


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for _, g in sorted(grads.items())))


def clip_by_batch_norm(
    grads: Mapping[str, np.ndarray], batch_size: int, max_ratio: float = 1.0
) -> dict[str, np.ndarray]:
    """Rescale so that ``global_norm / batch_size`` does not exceed ``max_ratio``."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    norm = global_norm(grads)
    limit = max_ratio * batch_size
    if norm <= limit:
        return dict(grads)
    scale = limit / norm
    return {k: g * scale for k, g in grads.items()}
