"""Noise-sentence samplers: in-batch negatives and masked-LM resampling.

Samplers only ever see the following sentences of the real pairs, never the
contexts, so the noise distribution cannot depend on ``a``.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .corpus import BOS_ID, EOS_ID, MASK_ID, PAD_ID, DataError
from .lm import LmState, dropout, init_lstm_stack, pad_batch, stack_step
from .optim import AdamState, adam_step, clip_by_batch_norm
from .serialize import save_arrays

log = logging.getLogger(__name__)

EXCLUDED_FROM_SAMPLING = (MASK_ID, PAD_ID, BOS_ID, EOS_ID)


def batch_negatives(b_sentences: Sequence[Sequence[int]]) -> list[list[tuple[int, ...]]]:
    """For pair ``i`` the negatives are every other ``b_j`` in ascending ``j``."""
    B = len(b_sentences)
    if B < 2:
        raise ValueError("batch NCE needs at least two pairs per batch")
    bs = [tuple(b) for b in b_sentences]
    return [[bs[j] for j in range(B) if j != i] for i in range(B)]


@dataclass(frozen=True)
class MaskedSentence:
    tokens: tuple[int, ...]
    positions: tuple[int, ...]
    originals: tuple[int, ...]

    def restore(self) -> tuple[int, ...]:
        out = list(self.tokens)
        for p, t in zip(self.positions, self.originals):
            out[p] = t
        return tuple(out)


def mask_tokens(sentence: Sequence[int], rate: float = 0.15, rng: np.random.Generator | None = None,
                mask_id: int = MASK_ID) -> MaskedSentence:
    """Mask each position with probability ``rate``; at least one position is always masked."""
    n = len(sentence)
    if n == 0:
        raise ValueError("cannot mask an empty sentence")
    if not 0.0 <= rate <= 1.0:
        raise ValueError("mask rate must lie in [0, 1]")
    rng = np.random.default_rng() if rng is None else rng
    chosen = np.flatnonzero(rng.random(n) < rate)
    if chosen.size == 0:
        chosen = np.array([rng.integers(n)])
    toks = list(sentence)
    originals = tuple(int(sentence[i]) for i in chosen)
    for i in chosen:
        toks[i] = mask_id
    return MaskedSentence(tuple(int(t) for t in toks), tuple(int(i) for i in chosen), originals)


# ---------------------------------------------------------------------------
# bidirectional masked LM


@dataclass(frozen=True)
class BiLmConfig:
    vocab_size: int
    emb_dim: int = 200
    hidden: int = 600
    layers: int = 2
    dropout: float = 0.5
    init_scale: float = 0.05
    forget_bias: float = 1.0
    dtype: str = "float64"


class BiLm:
    """Forward and backward recurrent stacks sharing one embedding for both inputs and the output."""

    kind = "bilm"

    def __init__(self, config: BiLmConfig, seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params: dict[str, Parameter] = {}
        if params is not None:
            self.params = {k: Parameter(np.array(v, dtype=config.dtype), k) for k, v in params.items()}
            return
        cfg = config
        rng = np.random.default_rng(seed)
        s = cfg.init_scale
        dt = cfg.dtype
        self.params["embedding"] = Parameter(rng.uniform(-s, s, (cfg.vocab_size, cfg.emb_dim)).astype(dt),
                                             "embedding")
        init_lstm_stack(self.params, "fwd", cfg.emb_dim, cfg.hidden, cfg.layers, rng, s, cfg.forget_bias, dt)
        init_lstm_stack(self.params, "bwd", cfg.emb_dim, cfg.hidden, cfg.layers, rng, s, cfg.forget_bias, dt)
        self.params["comb.weight"] = Parameter(rng.uniform(-s, s, (2 * cfg.hidden, cfg.emb_dim)).astype(dt),
                                               "comb.weight")
        self.params["comb.bias"] = Parameter(np.zeros(cfg.emb_dim, dtype=dt), "comb.bias")

    def _zero_state(self, n: int) -> LmState:
        H, L, dt = self.config.hidden, self.config.layers, self.config.dtype
        return LmState([Tensor(np.zeros((n, H), dtype=dt)) for _ in range(L)],
                       [Tensor(np.zeros((n, H), dtype=dt)) for _ in range(L)])

    def _run(self, prefix: str, inputs: np.ndarray, train: bool, rng) -> Tensor:
        emb = self.params["embedding"]
        state = self._zero_state(inputs.shape[1])
        tops = []
        for t in range(inputs.shape[0]):
            top, state = stack_step(self.params, prefix, self.config.layers, ad.take_rows(emb, inputs[t]),
                                    state, self.config.dropout, train, rng)
            tops.append(top)
        return ad.reshape(ad.stack(tops, axis=0), (inputs.shape[0] * inputs.shape[1], -1))

    def position_log_probs(self, sentences: Sequence[Sequence[int]], cols: np.ndarray, pos: np.ndarray,
                           train: bool = False, rng=None) -> Tensor:
        """Log-distributions at ``(sentence cols[m], position pos[m])`` from both directions."""
        n = len(sentences)
        if n == 0:
            raise ValueError("no sentences")
        ids = np.concatenate([np.asarray(s, dtype=np.intp) for s in sentences])
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise IndexError("token id out of range")
        lengths = np.array([len(s) for s in sentences], dtype=np.intp)
        fwd_in, _ = pad_batch([[BOS_ID, *s[:-1]] for s in sentences])
        bwd_in, _ = pad_batch([[EOS_ID, *reversed(s[1:])] for s in sentences])
        fwd = self._run("fwd", fwd_in, train, rng)
        bwd = self._run("bwd", bwd_in, train, rng)
        cols = np.asarray(cols, dtype=np.intp)
        pos = np.asarray(pos, dtype=np.intp)
        f = ad.take_rows(fwd, pos * n + cols)
        b = ad.take_rows(bwd, (lengths[cols] - 1 - pos) * n + cols)
        h = dropout(ad.concat([f, b], axis=1), self.config.dropout, train, rng)
        out = ad.linear(h, self.params["comb.weight"], self.params["comb.bias"])
        return ad.log_softmax(ad.matmul_t(out, self.params["embedding"]), axis=-1)

    def masked_loss(self, masked: Sequence[MaskedSentence], train: bool = False, rng=None) -> Tensor:
        """Mean cross-entropy over masked positions only."""
        cols = np.concatenate([np.full(len(m.positions), j) for j, m in enumerate(masked)])
        pos = np.concatenate([np.asarray(m.positions) for m in masked])
        targets = np.concatenate([np.asarray(m.originals) for m in masked])
        logp = self.position_log_probs([m.tokens for m in masked], cols, pos, train, rng)
        return ad.neg(ad.mean(ad.pick(logp, targets)))

    def save(self, directory: str | os.PathLike, **extra) -> None:
        meta = {"model": {"kind": self.kind, "config": asdict(self.config)}}
        meta.update(extra)
        save_arrays(directory, {k: p.data for k, p in self.params.items()}, meta)


def _sample_rows(logp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    p = np.exp(logp - logp.max(axis=1, keepdims=True))
    p[:, list(EXCLUDED_FROM_SAMPLING)] = 0.0
    cdf = np.cumsum(p, axis=1)
    u = rng.random(p.shape[0]) * cdf[:, -1]
    return np.minimum((cdf < u[:, None]).sum(axis=1), p.shape[1] - 1)


def resample_batch(masked: Sequence[MaskedSentence], bilm: BiLm, rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Fill every masked position independently from one bidirectional prediction pass."""
    outs = [list(m.tokens) for m in masked]
    todo = [j for j, m in enumerate(masked) if m.positions]
    if not todo:
        return [m.restore() for m in masked]
    cols = np.concatenate([np.full(len(masked[j].positions), k) for k, j in enumerate(todo)])
    pos = np.concatenate([np.asarray(masked[j].positions) for j in todo])
    logp = bilm.position_log_probs([masked[j].tokens for j in todo], cols, pos).data
    draws = _sample_rows(logp, rng)
    for k, p, w in zip(cols, pos, draws):
        outs[todo[k]][p] = int(w)
    return [tuple(o) for o in outs]


def resample(masked: MaskedSentence, bilm: BiLm, rng: np.random.Generator) -> tuple[int, ...]:
    return resample_batch([masked], bilm, rng)[0]


def make_negatives_by_resampling(b_sentences: Sequence[Sequence[int]], bilm: BiLm, nu: int,
                                 rng: np.random.Generator, mask_rate: float = 0.15, max_redraws: int = 10,
                                 audit: Callable[[dict], None] | None = None) -> list[list[tuple[int, ...]]]:
    """``nu`` independent mask-and-resample variants of each sentence.

    A variant identical to its source is redrawn up to ``max_redraws`` times
    and then kept.
    """
    sources = [tuple(b) for b in b_sentences]
    slots = [(i, l) for i in range(len(sources)) for l in range(nu)]
    result: dict[tuple[int, int], tuple[int, ...]] = {}
    final_mask: dict[tuple[int, int], tuple[int, ...]] = {}
    attempts = {s: 0 for s in slots}
    pending = slots
    while pending:
        masked = [mask_tokens(sources[i], mask_rate, rng) for i, _ in pending]
        drawn = resample_batch(masked, bilm, rng)
        retry = []
        for slot, sent, m in zip(pending, drawn, masked):
            attempts[slot] += 1
            final_mask[slot] = m.positions
            if sent == sources[slot[0]] and attempts[slot] <= max_redraws:
                retry.append(slot)
                continue
            if sent == sources[slot[0]]:
                log.info("kept a resampled negative identical to its source after %d redraws", max_redraws)
            result[slot] = sent
        pending = retry
    out = [[result[(i, l)] for l in range(nu)] for i in range(len(sources))]
    if audit is not None:
        for (i, l) in slots:
            audit({"pair": i, "negative": list(result[(i, l)]), "masked": list(final_mask[(i, l)]),
                   "attempts": attempts[(i, l)]})
    return out


# ---------------------------------------------------------------------------
# samplers


class BatchNceSampler:
    name = "batch-nce"

    def nu(self, batch_size: int) -> int:
        return batch_size - 1

    def negatives(self, b_sentences: Sequence[Sequence[int]], rng=None) -> list[list[tuple[int, ...]]]:
        return batch_negatives(b_sentences)


class ResamplingSampler:
    name = "resampling"

    def __init__(self, bilm: BiLm, nu: int = 15, mask_rate: float = 0.15, max_redraws: int = 10,
                 audit: Callable[[dict], None] | None = None):
        self.bilm = bilm
        self._nu = nu
        self.mask_rate = mask_rate
        self.max_redraws = max_redraws
        self.audit = audit

    def nu(self, batch_size: int) -> int:
        return self._nu

    def negatives(self, b_sentences, rng) -> list[list[tuple[int, ...]]]:
        return make_negatives_by_resampling(b_sentences, self.bilm, self._nu, rng, self.mask_rate,
                                            self.max_redraws, self.audit)


def jsonl_audit(path: str | os.PathLike) -> Callable[[dict], None]:
    """Writer for redraw audit records; starts a fresh file at ``path``."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "w", encoding="utf-8")

    def write(rec: dict) -> None:
        fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
        fh.flush()

    return write


# ---------------------------------------------------------------------------


def train_bilm(sentences: Sequence[Sequence[int]], config: BiLmConfig, epochs: int = 50, batch_size: int = 20,
               lr: float = 1e-4, seed: int = 0, mask_rate: float = 0.15,
               on_epoch: Callable[[int, float], None] | None = None) -> BiLm:
    """Fit the masked reconstruction objective; the returned model is meant to stay frozen."""
    from .training import iterate_batches, stream

    sents = [tuple(s) for s in sentences if len(s) > 0]
    if not sents:
        raise DataError("cannot train the bidirectional model on an empty corpus")
    model = BiLm(config, seed=seed)
    state = AdamState(lr=lr)
    batch_rng = stream(seed, "bilm-batches")
    mask_rng = stream(seed, "bilm-masks")
    drop_rng = stream(seed, "bilm-dropout")
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        for idx in iterate_batches(len(sents), batch_size, batch_rng, drop_last=False):
            masked = [mask_tokens(sents[i], mask_rate, mask_rng) for i in idx]
            with Tape() as tape:
                loss = model.masked_loss(masked, train=True, rng=drop_rng)
            grads = tape.backward(loss)
            adam_step(model.params, clip_by_batch_norm(grads, len(idx)), state)
            total += loss.item()
            count += 1
        if on_epoch is not None:
            on_epoch(epoch, total / max(count, 1))
    return model
