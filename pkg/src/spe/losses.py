"""Sentence-level NCE, sentence classification CE and word-level CE losses.

All terms are written in log space. ``log_cond`` and ``log_uncond`` are
``(B, 1 + nu)`` tensors whose column 0 holds the real continuation and the
remaining columns the noise sentences of each pair. The noise density of a
sentence is approximated by the same network run without context.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 10.0
    gamma: float = 0.1

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")

    @classmethod
    def parse(cls, text: str) -> "LossWeights":
        parts = [float(x) for x in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"expected three comma-separated weights, got {text!r}")
        return cls(*parts)

    @property
    def sentence_terms(self) -> bool:
        return self.beta > 0 or self.gamma > 0

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.alpha, self.beta, self.gamma)


def nce_posterior(log_pm_cond: float, log_pm_uncond: float, nu: int) -> float:
    """Probability that ``b`` is the real continuation: ``pc / (pc + nu * pu)``."""
    if nu < 1:
        raise ValueError("nu must be a positive integer")
    noise = math.log(nu) + log_pm_uncond
    return math.exp(log_pm_cond - np.logaddexp(log_pm_cond, noise))


def log_posteriors(log_cond, log_uncond, nu: int) -> tuple[Tensor, Tensor]:
    """``(log P(real), log(1 - P(real)))`` elementwise."""
    noise = ad.add(log_uncond, math.log(nu))
    denom = ad.logaddexp(log_cond, noise)
    return ad.sub(log_cond, denom), ad.sub(noise, denom)


def nce_loss_terms(log_cond, log_uncond) -> Tensor:
    """Per-pair sentence NCE loss ``(B,)``."""
    nu = log_cond.shape[1] - 1
    log_p, log_not_p = log_posteriors(log_cond, log_uncond, nu)
    return ad.neg(ad.add(log_p[:, 0], ad.sum_(log_not_p[:, 1:], axis=1)))


def classification_loss_terms(log_cond) -> Tensor:
    """Per-pair sentence classification CE ``(B,)``."""
    return ad.sub(ad.logsumexp(log_cond, axis=1), log_cond[:, 0])


def word_loss_terms(log_uncond_real) -> Tensor:
    return ad.neg(log_uncond_real)


def combined_loss(l_w, l_s, l_c, weights: LossWeights):
    """``alpha * L_w + beta * L_s + gamma * L_c``."""
    return ad.add(ad.add(ad.mul(l_w, weights.alpha), ad.mul(l_s, weights.beta)), ad.mul(l_c, weights.gamma))


# -- model-level wrappers ------------------------------------------------------


def candidate_log_probs(a: Sequence[int], b_real: Sequence[int], negatives: Sequence[Sequence[int]], model):
    cands = [b_real, *negatives]
    if any(len(c) == 0 for c in cands):
        raise ValueError("negatives must be non-empty")
    state = model.encode_contexts([a]).take(np.zeros(len(cands), dtype=np.intp))
    cond = model.continuation_log_probs(cands, state)
    uncond = model.continuation_log_probs(cands, model.start_state(len(cands)))
    return ad.reshape(cond, (1, -1)), ad.reshape(uncond, (1, -1))


def sentence_nce_loss(pair, negatives, model) -> float:
    cond, uncond = candidate_log_probs(pair.a, pair.b, negatives, model)
    return float(nce_loss_terms(cond, uncond).data[0])


def sentence_ce_loss(pair, negatives, model) -> float:
    cond, _ = candidate_log_probs(pair.a, pair.b, negatives, model)
    return float(classification_loss_terms(cond).data[0])


def word_ce_loss(b_real: Sequence[int], model) -> float:
    from .scoring import log_prob

    return -log_prob(b_real, None, model)
