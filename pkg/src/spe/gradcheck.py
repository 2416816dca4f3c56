"""Central finite-difference gradient checks.

The loss is re-evaluated in extended precision (``np.longdouble``) so that the
difference quotient is not swamped by float64 round-off on gradients that are
many orders of magnitude smaller than the loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .autodiff import Parameter, Tape


@dataclass
class GradMismatch:
    name: str
    index: tuple[int, ...]
    numeric: float
    analytic: float
    rel_error: float


def _value(out) -> np.longdouble:
    data = getattr(out, "data", out)
    return np.longdouble(np.asarray(data).reshape(()))


def analytic_gradients(loss_fn: Callable[[], object]) -> dict[str, np.ndarray]:
    with Tape() as tape:
        loss = loss_fn()
    return tape.backward(loss)


def numeric_gradients(loss_fn: Callable[[], object], params: Mapping[str, Parameter], eps: float = 1e-5,
                      precision=np.longdouble) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn`` with respect to every parameter element.

    Parameters are temporarily promoted to ``precision`` and restored
    afterwards.
    """
    saved = {k: p.data for k, p in params.items()}
    try:
        for p in params.values():
            p.data = p.data.astype(precision)
        h = precision(eps)
        out = {}
        for name, p in params.items():
            g = np.zeros(p.data.shape, dtype=np.float64)
            for idx in np.ndindex(p.data.shape):
                old = p.data[idx]
                p.data[idx] = old + h
                up = _value(loss_fn())
                p.data[idx] = old - h
                down = _value(loss_fn())
                p.data[idx] = old
                g[idx] = float((up - down) / (2 * h))
            out[name] = g
        return out
    finally:
        for k, p in params.items():
            p.data = saved[k]


def compare(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray],
            floor: float = 1e-8) -> list[GradMismatch]:
    """Every element's relative error ``|a - n| / max(floor, |a|, |n|)``, worst first."""
    rows = []
    for name, num in numeric.items():
        ana = np.asarray(analytic.get(name, np.zeros_like(num)), dtype=np.float64)
        for idx in np.ndindex(num.shape):
            a, n = float(ana[idx]), float(num[idx])
            rel = abs(a - n) / max(floor, abs(a), abs(n))
            rows.append(GradMismatch(name, idx, n, a, rel))
    rows.sort(key=lambda r: -r.rel_error)
    return rows


def check_gradients(loss_fn: Callable[[], object], params: Mapping[str, Parameter], eps: float = 1e-5,
                    floor: float = 1e-8) -> list[GradMismatch]:
    return compare(analytic_gradients(loss_fn), numeric_gradients(loss_fn, params, eps), floor)
