"""Sentence log-probabilities and the two answer-selection criteria.

Criterion 1 scores a candidate ``b`` by ``log p(b | a)``; criterion 2 by
``log p(b | a) - log p(b)``. Scores are never length-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

CRITERIA = (1, 2)


@dataclass(frozen=True)
class SentenceScore:
    log_cond: float
    log_uncond: float

    def value(self, criterion: int) -> float:
        return criterion_score(self.log_cond, self.log_uncond, criterion)


def criterion_score(log_cond, log_uncond, criterion: int):
    if criterion == 1:
        return log_cond
    if criterion == 2:
        return log_cond - log_uncond
    raise ValueError(f"criterion must be 1 or 2, got {criterion!r}")


def conditional_log_probs(model, contexts: Sequence[Sequence[int]], sentences: Sequence[Sequence[int]],
                          context_index: Sequence[int]) -> np.ndarray:
    """``log p(sentences[i] | contexts[context_index[i]])`` with no tape recording."""
    states = model.encode_contexts(contexts)
    init = states.take(np.asarray(context_index, dtype=np.intp))
    return model.continuation_log_probs(sentences, init).data.copy()


def unconditional_log_probs(model, sentences: Sequence[Sequence[int]]) -> np.ndarray:
    return model.continuation_log_probs(sentences, model.start_state(len(sentences))).data.copy()


def log_prob(b: Sequence[int], context: Sequence[int] | None, model) -> float:
    """``log p(b + <EOS>)``, conditioned on ``context`` through the carried-over state when given."""
    if len(b) == 0:
        raise ValueError("cannot score an empty sentence")
    if context is None:
        return float(unconditional_log_probs(model, [b])[0])
    return float(conditional_log_probs(model, [context], [b], [0])[0])


def sentence_score(a: Sequence[int], b: Sequence[int], model) -> SentenceScore:
    return SentenceScore(log_prob(b, a, model), log_prob(b, None, model))


def score_candidate(a: Sequence[int], b: Sequence[int], model, criterion: int) -> float:
    if criterion == 1:
        return log_prob(b, a, model)
    return sentence_score(a, b, model).value(criterion)


def select_answer(scores: Sequence[float]) -> int:
    """Index of the highest score; the lowest index wins ties."""
    if len(scores) < 2:
        raise ValueError("need at least two choices")
    return int(np.argmax(np.asarray(scores, dtype=np.float64)))


def choice_log_probs(model, context: Sequence[int], choices: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Conditional and unconditional log-probabilities of every choice."""
    k = len(choices)
    cond = conditional_log_probs(model, [context], choices, [0] * k)
    uncond = unconditional_log_probs(model, choices)
    return cond, uncond


def answer_question(context: Sequence[int], choices: Sequence[Sequence[int]], model, criterion: int) -> int:
    cond, uncond = choice_log_probs(model, context, choices)
    return select_answer(criterion_score(cond, uncond, criterion))
