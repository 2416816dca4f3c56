"""Word-CE pre-training, sentence-level NCE training, checkpoints and model selection."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .corpus import DataError, SentencePair
from .losses import LossWeights, classification_loss_terms, combined_loss, nce_loss_terms, word_loss_terms
from .optim import AdamState, adam_step, clip_by_batch_norm
from .serialize import atomic_write_text

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """A loss or gradient became non-finite."""


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose under one global seed."""
    key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator, drop_last: bool = True) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        yield order[start : start + batch_size]


@dataclass
class TrainConfig:
    batch_size: int = 16
    nu: int | None = None
    epochs: int = 50
    lr: float = 1e-4
    seed: int = 0
    sampler: str = "batch-nce"
    checkpoint_interval: int = 5
    clip_ratio: float = 1.0
    detach_noise: bool = False

    def __post_init__(self):
        if self.sampler not in ("batch-nce", "resampling"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.sampler == "batch-nce":
            if self.nu is not None and self.nu != self.batch_size - 1:
                raise ValueError("batch NCE fixes nu = batch_size - 1")
            self.nu = self.batch_size - 1
        elif self.nu is None:
            self.nu = 15
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint interval must be positive")

    @property
    def checkpoint_epochs(self) -> list[int]:
        return list(range(self.checkpoint_interval, self.epochs + 1, self.checkpoint_interval))


@dataclass
class Checkpoint:
    path: str
    epoch: int
    config_hash: str = ""
    metric: float | None = None


@dataclass
class EpochStats:
    epoch: int
    mean_l_w: float
    mean_l_s: float
    mean_l_c: float
    mean_l: float
    wall_time: float
    valid_l_w: float | None = None

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    epochs: list[EpochStats] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)
    checkpoints: list[Checkpoint] = field(default_factory=list)


def config_hash(*parts) -> str:
    payload = json.dumps([asdict(p) if hasattr(p, "__dataclass_fields__") else p for p in parts],
                         sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {what}: {value}")


def batch_loss(model, pairs: Sequence[SentencePair], negatives, weights: LossWeights, train: bool,
               rng, detach_noise: bool = False):
    """Mean over the batch of ``alpha L_w + beta L_s + gamma L_c`` plus the mean of each term.

    With ``negatives=None`` only the word-level term is evaluated.
    """
    B = len(pairs)
    reals = [p.b for p in pairs]
    if negatives is None:
        uncond = model.continuation_log_probs(reals, model.start_state(B, train, rng), train, rng)
        l_w = word_loss_terms(uncond)
        per_pair = ad.mul(l_w, weights.alpha)
        total = ad.mean(per_pair)
        return total, {"l_w": float(l_w.data.mean()), "l_s": 0.0, "l_c": 0.0}

    width = 1 + len(negatives[0])
    cands = [s for p, neg in zip(pairs, negatives) for s in (p.b, *neg)]
    owners = np.repeat(np.arange(B), width)
    contexts = model.encode_contexts([p.a for p in pairs], train, rng)
    cond = model.continuation_log_probs(cands, contexts.take(owners), train, rng)
    cond = ad.reshape(cond, (B, width))

    uniq: dict[tuple, int] = {}
    inverse = np.array([uniq.setdefault(tuple(s), len(uniq)) for s in cands], dtype=np.intp)
    uniq_sents = list(uniq)
    uncond_u = model.continuation_log_probs(uniq_sents, model.start_state(len(uniq_sents), train, rng), train, rng)
    uncond = ad.reshape(ad.take_rows(uncond_u, inverse), (B, width))

    l_w = word_loss_terms(uncond[:, 0])
    noise_side = Tensor(uncond.data.copy()) if detach_noise else uncond
    l_s = nce_loss_terms(cond, noise_side)
    l_c = classification_loss_terms(cond)
    total = ad.mean(combined_loss(l_w, l_s, l_c, weights))
    return total, {"l_w": float(l_w.data.mean()), "l_s": float(l_s.data.mean()), "l_c": float(l_c.data.mean())}


def _update(model, loss, tape: Tape, batch_size: int, state: AdamState, clip_ratio: float) -> None:
    _check_finite(loss.item(), "loss")
    grads = tape.backward(loss)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    adam_step(model.params, clip_by_batch_norm(grads, batch_size, clip_ratio), state)


def mean_word_loss(model, sentences: Sequence[Sequence[int]], chunk: int = 256) -> float:
    """Evaluation-mode mean of ``-log p(b)`` over ``sentences``."""
    total = 0.0
    for start in range(0, len(sentences), chunk):
        part = sentences[start : start + chunk]
        total += float(-model.continuation_log_probs(part, model.start_state(len(part))).data.sum())
    return total / max(len(sentences), 1)


def pretrain(sentences: Sequence[Sequence[int]], model, epochs: int = 30, batch_size: int = 20, lr: float = 1e-4,
             seed: int = 0, clip_ratio: float = 1.0, validation: Sequence[Sequence[int]] | None = None,
             on_epoch: Callable[[EpochStats], None] | None = None, state: AdamState | None = None) -> TrainResult:
    """Minimize the mean word-level CE of each batch; updates ``model`` in place."""
    sents = [tuple(s) for s in sentences if len(s) > 0]
    if not sents:
        raise DataError("cannot pretrain on an empty corpus")
    pairs = [SentencePair((), s) for s in sents]
    state = AdamState(lr=lr) if state is None else state
    batch_rng = stream(seed, "batches")
    drop_rng = stream(seed, "dropout")
    result = TrainResult()
    weights = LossWeights(1.0, 0.0, 0.0)
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for idx in iterate_batches(len(pairs), batch_size, batch_rng):
            batch = [pairs[i] for i in idx]
            with Tape() as tape:
                loss, _ = batch_loss(model, batch, None, weights, True, drop_rng)
            _update(model, loss, tape, len(batch), state, clip_ratio)
            losses.append(loss.item())
        result.batch_losses.extend(losses)
        m = float(np.mean(losses)) if losses else float("nan")
        stats = EpochStats(epoch, m, 0.0, 0.0, m, time.perf_counter() - t0,
                           mean_word_loss(model, validation) if validation else None)
        result.epochs.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return result


def train_nce(pairs: Sequence[SentencePair], model, sampler, config: TrainConfig, weights: LossWeights,
              out_dir: str | os.PathLike | None = None, on_epoch: Callable[[EpochStats], None] | None = None,
              checkpoint_meta: dict | None = None, state: AdamState | None = None) -> TrainResult:
    """Sentence-level NCE training with periodic checkpoints.

    When both sentence-level weights are zero the sampler is never called and
    each update is the word-level step used by :func:`pretrain`.
    """
    pairs = [p for p in pairs if p.a and p.b]
    if not pairs:
        raise DataError("no sentence pairs to train on")
    B = config.batch_size
    if len(pairs) < B:
        raise DataError(f"{len(pairs)} pairs cannot fill a batch of {B}")
    state = AdamState(lr=config.lr) if state is None else state
    batch_rng = stream(config.seed, "batches")
    drop_rng = stream(config.seed, "dropout")
    noise_rng = stream(config.seed, "noise")
    use_sentences = weights.sentence_terms
    chash = config_hash(config, weights, getattr(model, "config", None))
    result = TrainResult()
    log_path = Path(out_dir) / "train_log.jsonl" if out_dir is not None else None
    log_lines: list[str] = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        sums = {"l_w": 0.0, "l_s": 0.0, "l_c": 0.0, "l": 0.0}
        nb = 0
        for idx in iterate_batches(len(pairs), B, batch_rng):
            batch = [pairs[i] for i in idx]
            negs = None
            if use_sentences:
                negs = sampler.negatives([p.b for p in batch], noise_rng)
                want = sampler.nu(B)
                if want != config.nu or any(len(n) != want for n in negs):
                    raise ValueError(f"sampler returned the wrong number of negatives (expected {config.nu})")
            with Tape() as tape:
                loss, parts = batch_loss(model, batch, negs, weights, True, drop_rng, config.detach_noise)
            _update(model, loss, tape, B, state, config.clip_ratio)
            result.batch_losses.append(loss.item())
            for k, v in parts.items():
                sums[k] += v
            sums["l"] += loss.item()
            nb += 1
        stats = EpochStats(epoch, sums["l_w"] / nb, sums["l_s"] / nb, sums["l_c"] / nb, sums["l"] / nb,
                           time.perf_counter() - t0)
        result.epochs.append(stats)
        log.info("epoch %d: L=%.4f L_w=%.4f L_s=%.4f L_c=%.4f (%.1fs)", epoch, stats.mean_l, stats.mean_l_w,
                 stats.mean_l_s, stats.mean_l_c, stats.wall_time)
        if on_epoch is not None:
            on_epoch(stats)
        if log_path is not None:
            log_lines.append(json.dumps(stats.to_json(), sort_keys=True))
            atomic_write_text(log_path, "\n".join(log_lines) + "\n")
        if out_dir is not None and epoch % config.checkpoint_interval == 0:
            path = Path(out_dir) / f"epoch_{epoch:03d}"
            meta = dict(checkpoint_meta or {})
            meta.update({"epoch": epoch, "config_hash": chash, "weights": list(weights.as_tuple()),
                         "sampler": config.sampler})
            model.save(path, **meta)
            result.checkpoints.append(Checkpoint(str(path), epoch, chash))
    return result


def list_checkpoints(directory: str | os.PathLike) -> list[Checkpoint]:
    from .serialize import load_manifest

    out = []
    for sub in sorted(Path(directory).glob("epoch_*")):
        if (sub / "manifest.json").exists():
            man = load_manifest(sub)
            out.append(Checkpoint(str(sub), int(man.get("epoch", 0)), man.get("config_hash", "")))
    out.sort(key=lambda c: c.epoch)
    return out


def best_index(accuracies: Sequence[float]) -> int:
    """Position of the highest accuracy; the earliest wins ties."""
    if not accuracies:
        raise ValueError("no checkpoints to choose from")
    return int(np.argmax(np.asarray(accuracies, dtype=np.float64)))


@dataclass
class Selection:
    checkpoint: Checkpoint
    criterion: int
    validation: list[float]
    holdout_accuracy: float
    validation_reports: list = field(default_factory=list)
    holdout_report: object = None

    def to_json(self) -> dict:
        return {
            "criterion": self.criterion,
            "selected_epoch": self.checkpoint.epoch,
            "selected_path": self.checkpoint.path,
            "validation_accuracy": self.validation,
            "holdout_accuracy": self.holdout_accuracy,
        }


def select_checkpoint(checkpoints: Sequence[Checkpoint], validation, holdout, criterion: int,
                      scorer_for: Callable[[Checkpoint], object]) -> Selection:
    """Choose by validation accuracy, then report the chosen checkpoint's holdout accuracy."""
    from .cloze import grade

    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    if not validation or not holdout:
        raise DataError("validation and holdout question sets must be non-empty")
    reports = []
    for ck in checkpoints:
        rep = grade(validation, scorer_for(ck), criterion)
        ck.metric = rep.accuracy
        reports.append(rep)
    accs = [r.accuracy for r in reports]
    best = checkpoints[best_index(accs)]
    hold = grade(holdout, scorer_for(best), criterion)
    return Selection(best, criterion, accs, hold.accuracy, reports, hold)
