"""Sentence-cloze questions: generation, file format, grading and reports."""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import DataError, SentencePair, Vocabulary
from .noise import mask_tokens, resample_batch
from .scoring import criterion_score, select_answer
from .serialize import atomic_write_text, dump_json

PROVENANCES = ("batch-neg", "resampled", "external")
MAX_REDRAWS = 10


@dataclass(frozen=True)
class ClozeQuestion:
    context: str
    choices: tuple[str, ...]
    answer: int
    provenance: str = "external"

    def __post_init__(self):
        if len(self.choices) < 2:
            raise ValueError("a question needs at least two choices")
        if not 0 <= self.answer < len(self.choices):
            raise ValueError(f"answer index {self.answer} out of range for {len(self.choices)} choices")

    @property
    def k(self) -> int:
        return len(self.choices)

    def to_json(self) -> dict:
        return {"context": self.context, "choices": list(self.choices), "answer": self.answer,
                "provenance": self.provenance}


def generate_questions(pairs: Sequence[SentencePair], vocab: Vocabulary, mode: str = "batch-neg", k: int = 8,
                       rng: np.random.Generator | None = None, bilm=None, mask_rate: float = 0.15,
                       count: int | None = None) -> tuple[list[ClozeQuestion], int]:
    """One question per evaluation pair (or the first ``count``); returns ``(questions, dropped)``.

    ``batch-neg`` distractors are following sentences of other evaluation
    pairs; ``resampled`` distractors are masked-LM rewrites of the pair's own
    following sentence.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if mode not in ("batch-neg", "resampled"):
        raise ValueError(f"unknown question mode {mode!r}")
    rng = np.random.default_rng() if rng is None else rng
    pairs = list(pairs)
    if mode == "batch-neg" and len(pairs) < k:
        raise DataError(f"{len(pairs)} evaluation pairs cannot supply {k - 1} distinct distractors")
    if mode == "resampled" and bilm is None:
        raise ValueError("resampled questions need a bidirectional model")
    if count is not None:
        pairs = pairs[:count]
    pool = [tuple(p.b) for p in pairs]
    questions: list[ClozeQuestion] = []
    dropped = 0
    for i, pair in enumerate(pairs):
        true_b = tuple(pair.b)
        if mode == "batch-neg":
            distractors = _pool_distractors(pool, i, true_b, k - 1, rng)
        else:
            distractors = _resampled_distractors(true_b, k - 1, bilm, mask_rate, rng)
        if distractors is None:
            dropped += 1
            continue
        pos = int(rng.integers(k))
        choices = list(distractors)
        choices.insert(pos, true_b)
        questions.append(ClozeQuestion(
            vocab.decode_text(pair.a),
            tuple(vocab.decode_text(c) for c in choices),
            pos,
            "batch-neg" if mode == "batch-neg" else "resampled",
        ))
    return questions, dropped


def _pool_distractors(pool, own: int, true_b, n: int, rng) -> list | None:
    chosen: list[tuple] = []
    seen = {true_b}
    for _ in range(n):
        for _attempt in range(MAX_REDRAWS + 1):
            j = int(rng.integers(len(pool) - 1))
            j = j + 1 if j >= own else j
            cand = pool[j]
            if cand not in seen:
                break
        else:
            return None
        seen.add(cand)
        chosen.append(cand)
    return chosen


def _resampled_distractors(true_b, n: int, bilm, mask_rate: float, rng) -> list | None:
    chosen: list[tuple] = []
    seen = {true_b}
    attempts = 0
    need = n
    while need > 0:
        if attempts > MAX_REDRAWS:
            return None
        masked = [mask_tokens(true_b, mask_rate, rng) for _ in range(need)]
        for cand in resample_batch(masked, bilm, rng):
            if cand not in seen:
                seen.add(cand)
                chosen.append(cand)
        need = n - len(chosen)
        attempts += 1
    return chosen


# ---------------------------------------------------------------------------
# files


def save_questions(path: str | os.PathLike, questions: Iterable[ClozeQuestion], meta: dict | None = None) -> None:
    lines = [json.dumps(q.to_json(), ensure_ascii=False, sort_keys=True) for q in questions]
    atomic_write_text(path, "".join(line + "\n" for line in lines))
    if meta is not None:
        atomic_write_text(meta_path(path), dump_json(meta))


def meta_path(path: str | os.PathLike) -> str:
    return os.fspath(path) + ".meta.json"


def load_question_meta(path: str | os.PathLike) -> dict | None:
    mp = meta_path(path)
    if not os.path.exists(mp):
        return None
    with open(mp, encoding="utf-8") as fh:
        return json.load(fh)


def _parse_record(rec, where: str) -> ClozeQuestion:
    if not isinstance(rec, dict):
        raise DataError(f"{where}: record must be a JSON object")
    ctx, choices, answer = rec.get("context"), rec.get("choices"), rec.get("answer")
    if not isinstance(ctx, str):
        raise DataError(f"{where}: 'context' must be a string")
    if not isinstance(choices, list) or len(choices) < 2 or not all(isinstance(c, str) for c in choices):
        raise DataError(f"{where}: 'choices' must be a list of at least two strings")
    if isinstance(answer, bool) or not isinstance(answer, int):
        raise DataError(f"{where}: 'answer' must be an integer")
    if not 0 <= answer < len(choices):
        raise DataError(f"{where}: answer {answer} out of range for {len(choices)} choices")
    prov = rec.get("provenance", "external")
    if prov not in PROVENANCES:
        raise DataError(f"{where}: unknown provenance {prov!r}")
    return ClozeQuestion(ctx, tuple(choices), answer, prov)


def load_questions(path: str | os.PathLike) -> list[ClozeQuestion]:
    questions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: invalid JSON ({exc.msg})") from exc
            questions.append(_parse_record(rec, where))
    return questions


def load_external_questions(path: str | os.PathLike) -> list[ClozeQuestion]:
    """Read a human-authored question file; every question is tagged ``external``."""
    return [ClozeQuestion(q.context, q.choices, q.answer, "external") for q in load_questions(path)]


# ---------------------------------------------------------------------------
# scorers


class ModelScorer:
    """Scores every choice with a trained LM, batching questions for throughput."""

    def __init__(self, model, vocab: Vocabulary, chunk: int = 32, threads: int | None = None):
        self.model = model
        self.vocab = vocab
        self.chunk = chunk
        if threads is None:
            threads = int(os.environ.get("SPE_THREADS", "1") or 1)
        self.threads = max(1, threads)

    def _score_chunk(self, qs: Sequence[ClozeQuestion]) -> list[tuple[np.ndarray, np.ndarray]]:
        from .scoring import conditional_log_probs, unconditional_log_probs

        contexts = [self.vocab.encode_text(q.context) for q in qs]
        choices = [self.vocab.encode_text(c) for q in qs for c in q.choices]
        owners = [i for i, q in enumerate(qs) for _ in q.choices]
        cond = conditional_log_probs(self.model, contexts, choices, owners)
        uncond = unconditional_log_probs(self.model, choices)
        out, start = [], 0
        for q in qs:
            out.append((cond[start : start + q.k], uncond[start : start + q.k]))
            start += q.k
        return out

    def scores(self, questions: Sequence[ClozeQuestion]) -> list[tuple[np.ndarray, np.ndarray]]:
        chunks = [questions[i : i + self.chunk] for i in range(0, len(questions), self.chunk)]
        if self.threads == 1:
            parts = [self._score_chunk(c) for c in chunks]
        else:
            with ThreadPoolExecutor(self.threads) as pool:
                parts = list(pool.map(self._score_chunk, chunks))
        return [s for part in parts for s in part]


class RandomScorer:
    """Uniform-random scores; a chance-level reference."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def scores(self, questions):
        return [(self.rng.random(q.k), np.zeros(q.k)) for q in questions]


class TableScorer:
    """Looks up fixed ``(log_cond, log_uncond)`` pairs by choice text."""

    def __init__(self, table: dict[tuple[str, str], tuple[float, float]]):
        self.table = table

    def scores(self, questions):
        out = []
        for q in questions:
            vals = np.array([self.table[(q.context, c)] for c in q.choices], dtype=np.float64)
            out.append((vals[:, 0], vals[:, 1]))
        return out


def question_key(questions: Sequence[ClozeQuestion]) -> str:
    """Content hash identifying a question set."""
    h = hashlib.sha256()
    for q in questions:
        h.update(json.dumps(q.to_json(), sort_keys=True, ensure_ascii=False).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()[:16]


class DumpScorer:
    """Replays persisted score dumps, one per question set."""

    def __init__(self, dumps: dict[str, str | os.PathLike]):
        self.dumps = dict(dumps)

    def scores(self, questions):
        key = question_key(questions)
        if key not in self.dumps:
            raise DataError(f"no score dump for question set {key}")
        answers, scores = read_score_dump(self.dumps[key])
        if answers != [q.answer for q in questions]:
            raise DataError(f"{self.dumps[key]}: dump does not match the question set")
        return scores


# ---------------------------------------------------------------------------
# grading


@dataclass
class EvalReport:
    criterion: int
    accuracy: float
    count: int
    correct: int
    selected: list[int] = field(default_factory=list)
    scores: list[list[float]] = field(default_factory=list)
    name: str = ""
    dropped: int = 0

    def to_json(self, details: bool = True) -> dict:
        out = {"criterion": self.criterion, "accuracy": self.accuracy, "count": self.count,
               "correct": self.correct, "name": self.name, "dropped": self.dropped}
        if details:
            out["selected"] = self.selected
            out["scores"] = self.scores
        return out


def grade_scores(questions: Sequence[ClozeQuestion], scores, criterion: int, name: str = "") -> EvalReport:
    if not questions:
        raise DataError("cannot grade an empty question set")
    selected, per_q, correct = [], [], 0
    for q, (cond, uncond) in zip(questions, scores):
        vals = np.asarray(criterion_score(np.asarray(cond), np.asarray(uncond), criterion), dtype=np.float64)
        pick = select_answer(vals)
        selected.append(pick)
        per_q.append([float(v) for v in vals])
        correct += int(pick == q.answer)
    return EvalReport(criterion, correct / len(questions), len(questions), correct, selected, per_q, name)


def grade(questions: Sequence[ClozeQuestion], scorer, criterion: int, name: str = "") -> EvalReport:
    if not questions:
        raise DataError("cannot grade an empty question set")
    return grade_scores(questions, scorer.scores(questions), criterion, name)


def write_score_dump(path: str | os.PathLike, questions: Sequence[ClozeQuestion], scores) -> None:
    lines = []
    for qi, (q, (cond, uncond)) in enumerate(zip(questions, scores)):
        for ci in range(q.k):
            lines.append(json.dumps({"question": qi, "choice": ci, "answer": q.answer,
                                     "log_cond": float(cond[ci]), "log_uncond": float(uncond[ci])},
                                    sort_keys=True))
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_score_dump(path: str | os.PathLike) -> tuple[list[int], list[tuple[np.ndarray, np.ndarray]]]:
    """Answers and per-question score arrays recovered from a dump."""
    rows: dict[int, list[dict]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                rows.setdefault(rec["question"], []).append(rec)
    answers, scores = [], []
    for qi in sorted(rows):
        recs = sorted(rows[qi], key=lambda r: r["choice"])
        answers.append(recs[0]["answer"])
        scores.append((np.array([r["log_cond"] for r in recs]), np.array([r["log_uncond"] for r in recs])))
    return answers, scores


def accuracy_from_dump(path: str | os.PathLike, criterion: int) -> float:
    answers, scores = read_score_dump(path)
    if not answers:
        raise DataError(f"{path}: empty score dump")
    hits = sum(int(select_answer(criterion_score(c, u, criterion)) == a) for a, (c, u) in zip(answers, scores))
    return hits / len(answers)


# ---------------------------------------------------------------------------
# tables


def render_table(rows: Sequence[dict], question_sets: Sequence[str] = ("batch-neg", "resampled"), k: int = 8) -> str:
    """Aligned text table: one row per trained model, one column per (question set, criterion).

    Each row is ``{"label": str, "weights": (a, b, g) | None, "acc": {(set, criterion): float}}``;
    a chance-level row comes first.
    """
    header = ["model", "alpha", "beta", "gamma"]
    for s in question_sets:
        header += [f"{s} c1", f"{s} c2"]
    body = [["random", "-", "-", "-"] + [f"{100.0 / k:.1f}%"] * (2 * len(question_sets))]
    for row in rows:
        w = row.get("weights")
        cells = [row["label"]] + (["-"] * 3 if w is None else [f"{x:g}" for x in w])
        for s in question_sets:
            for c in (1, 2):
                acc = row["acc"].get((s, c))
                cells.append("n/a" if acc is None else f"{100.0 * acc:.1f}%")
        body.append(cells)
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]

    def fmt(r):
        return "  ".join(c.ljust(wd) if i == 0 else c.rjust(wd) for i, (c, wd) in enumerate(zip(r, widths)))

    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule, *(fmt(r) for r in body)]) + "\n"
