"""Word-level recurrent LM with tied embeddings and a relaxed-softmax head.

Embedding -> two gated-memory-cell layers -> linear projection to
``emb_dim + 1`` outputs. The first ``emb_dim`` outputs are multiplied by the
embedding matrix (tied output layer); the extra output drives a per-step
temperature ``softplus(t) + 0.01`` that divides the logits.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .corpus import BOS_ID, EOS_ID, PAD_ID
from .serialize import load_arrays, save_arrays


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    emb_dim: int = 200
    hidden: int = 600
    layers: int = 2
    relaxed: bool = True
    dropout: float = 0.5
    temp_floor: float = 1e-2
    init_scale: float = 0.05
    forget_bias: float = 1.0
    dtype: str = "float64"


def relaxed_softmax(logits, t_raw=None, relaxed: bool = True, floor: float = 1e-2) -> np.ndarray:
    """Probabilities ``softmax(logits / tau)`` with ``tau = softplus(t_raw) + floor``.

    With ``relaxed=False`` the temperature is fixed at 1.
    """
    z = np.asarray(logits, dtype=np.float64)
    if relaxed:
        tau = np.logaddexp(0.0, np.asarray(t_raw, dtype=np.float64)) + floor
        z = z / np.expand_dims(tau, -1) if np.ndim(tau) else z / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def temperature(t_raw, floor: float = 1e-2):
    return np.logaddexp(0.0, t_raw) + floor


@dataclass
class LmState:
    """Per-layer hidden and memory-cell rows for a batch of sequences."""

    h: list[Tensor]
    c: list[Tensor]

    @property
    def rows(self) -> int:
        return self.h[0].shape[0]

    def take(self, rows) -> "LmState":
        return LmState([ad.take_rows(x, rows) for x in self.h], [ad.take_rows(x, rows) for x in self.c])

    def arrays(self) -> list[np.ndarray]:
        return [x.data for x in self.h] + [x.data for x in self.c]


# ---------------------------------------------------------------------------
# recurrent stack helpers, shared with the bidirectional sampler model


def init_lstm_stack(params: dict, prefix: str, in_dim: int, hidden: int, layers: int,
                    rng: np.random.Generator, scale: float, forget_bias: float, dtype="float64") -> None:
    for layer in range(layers):
        d = in_dim if layer == 0 else hidden
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = forget_bias
        for name, arr in (
            ("w_in", rng.uniform(-scale, scale, (d, 4 * hidden))),
            ("w_rec", rng.uniform(-scale, scale, (hidden, 4 * hidden))),
            ("bias", bias),
        ):
            key = f"{prefix}{layer}.{name}"
            params[key] = Parameter(arr.astype(dtype), key)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("train mode with dropout needs a random generator")
    keep = 1.0 - rate
    mask = ((rng.random(x.shape) < keep) / keep).astype(x.data.dtype)
    return ad.mul(x, mask)


def stack_step(params: dict, prefix: str, layers: int, x: Tensor, state: LmState,
               rate: float, train: bool, rng, keep=None) -> tuple[Tensor, LmState]:
    """Advance every layer by one step; dropout sits between layers only."""
    hs, cs = [], []
    inp = x
    for layer in range(layers):
        if layer > 0:
            inp = dropout(inp, rate, train, rng)
        h, c = ad.lstm_cell(
            inp, state.h[layer], state.c[layer],
            params[f"{prefix}{layer}.w_in"], params[f"{prefix}{layer}.w_rec"], params[f"{prefix}{layer}.bias"],
            keep,
        )
        hs.append(h)
        cs.append(c)
        inp = h
    return inp, LmState(hs, cs)


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    """Time-major ``(T, N)`` id matrix and the length of each column."""
    lengths = np.array([len(s) for s in seqs], dtype=np.intp)
    T = int(lengths.max()) if len(seqs) else 0
    out = np.full((T, len(seqs)), pad, dtype=np.intp)
    for j, s in enumerate(seqs):
        out[: len(s), j] = s
    return out, lengths


# ---------------------------------------------------------------------------


class LanguageModel:
    kind = "lm"

    def __init__(self, config: LmConfig, seed: int = 0, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params: dict[str, Parameter] = {}
        if params is not None:
            for name, arr in params.items():
                self.params[name] = Parameter(np.array(arr, dtype=config.dtype), name)
            self._check_shapes()
            return
        rng = np.random.default_rng(seed)
        cfg = config
        s = cfg.init_scale
        dt = cfg.dtype
        self.params["embedding"] = Parameter(rng.uniform(-s, s, (cfg.vocab_size, cfg.emb_dim)).astype(dt),
                                             "embedding")
        init_lstm_stack(self.params, "lstm", cfg.emb_dim, cfg.hidden, cfg.layers, rng, s, cfg.forget_bias, dt)
        out_dim = cfg.emb_dim + (1 if cfg.relaxed else 0)
        self.params["proj.weight"] = Parameter(rng.uniform(-s, s, (cfg.hidden, out_dim)).astype(dt), "proj.weight")
        self.params["proj.bias"] = Parameter(np.zeros(out_dim, dtype=dt), "proj.bias")

    def _expected_shapes(self) -> dict[str, tuple]:
        cfg = self.config
        out_dim = cfg.emb_dim + (1 if cfg.relaxed else 0)
        shapes = {"embedding": (cfg.vocab_size, cfg.emb_dim), "proj.weight": (cfg.hidden, out_dim),
                  "proj.bias": (out_dim,)}
        for layer in range(cfg.layers):
            d = cfg.emb_dim if layer == 0 else cfg.hidden
            shapes[f"lstm{layer}.w_in"] = (d, 4 * cfg.hidden)
            shapes[f"lstm{layer}.w_rec"] = (cfg.hidden, 4 * cfg.hidden)
            shapes[f"lstm{layer}.bias"] = (4 * cfg.hidden,)
        return shapes

    def _check_shapes(self) -> None:
        expected = self._expected_shapes()
        got = {k: p.shape for k, p in self.params.items()}
        if got != expected:
            raise ValueError(f"parameter shapes {got} do not match architecture {expected}")

    def zero(self) -> None:
        """Set every weight to zero (yields a uniform next-token distribution)."""
        for p in self.params.values():
            p.data[...] = 0.0

    def copy(self) -> "LanguageModel":
        return type(self)(self.config, params={k: p.data.copy() for k, p in self.params.items()})

    # -- recurrence --------------------------------------------------------

    def zero_state(self, n: int) -> LmState:
        H, L, dt = self.config.hidden, self.config.layers, self.config.dtype
        return LmState([Tensor(np.zeros((n, H), dtype=dt)) for _ in range(L)],
                       [Tensor(np.zeros((n, H), dtype=dt)) for _ in range(L)])

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise IndexError(f"token id out of range [0, {self.config.vocab_size})")

    def unroll(self, inputs: np.ndarray, state: LmState, lengths=None, train: bool = False,
               rng=None) -> tuple[list[Tensor], LmState]:
        """Run the stack over a ``(T, N)`` id matrix.

        Returns the top-layer output after each step and the final state. With
        ``lengths``, column ``j`` stops updating after ``lengths[j]`` steps.
        """
        inputs = np.asarray(inputs, dtype=np.intp)
        self._check_ids(inputs)
        emb = self.params["embedding"]
        tops = []
        for t in range(inputs.shape[0]):
            keep = None if lengths is None else (t < np.asarray(lengths))
            x = ad.take_rows(emb, inputs[t])
            top, state = stack_step(self.params, "lstm", self.config.layers, x, state,
                                    self.config.dropout, train, rng, keep)
            tops.append(top)
        return tops, state

    def output_log_probs(self, top: Tensor, train: bool = False, rng=None) -> Tensor:
        """Next-token log-distributions for top-layer rows ``(M, H) -> (M, V)``."""
        cfg = self.config
        top = dropout(top, cfg.dropout, train, rng)
        out = ad.linear(top, self.params["proj.weight"], self.params["proj.bias"])
        if cfg.relaxed:
            vec = out[:, : cfg.emb_dim]
            tau = ad.softplus(out[:, cfg.emb_dim :]) + cfg.temp_floor
            logits = ad.matmul_t(vec, self.params["embedding"]) / tau
        else:
            logits = ad.matmul_t(out, self.params["embedding"])
        return ad.log_softmax(logits, axis=-1)

    def temperatures(self, top: Tensor) -> np.ndarray:
        cfg = self.config
        if not cfg.relaxed:
            return np.ones(top.shape[0])
        out = top.data @ self.params["proj.weight"].data + self.params["proj.bias"].data
        return temperature(out[:, cfg.emb_dim], cfg.temp_floor)

    def forward(self, tokens: Sequence[int], init: LmState | None = None, train_mode: bool = False,
                rng=None) -> tuple[Tensor, LmState]:
        """Per-step next-token log-distributions ``(len(tokens), V)`` and the final state."""
        if len(tokens) == 0:
            raise ValueError("forward needs at least one token")
        init = self.zero_state(1) if init is None else init
        inputs = np.asarray(tokens, dtype=np.intp).reshape(-1, 1)
        tops, state = self.unroll(inputs, init, train=train_mode, rng=rng)
        return self.output_log_probs(ad.concat(tops, axis=0), train_mode, rng), state

    # -- sentence-level helpers -------------------------------------------

    def start_state(self, n: int = 1, train: bool = False, rng=None) -> LmState:
        """State after reading ``<BOS>`` from the zero state, broadcast to ``n`` rows."""
        _, state = self.unroll(np.array([[BOS_ID]]), self.zero_state(1), train=train, rng=rng)
        return state if n == 1 else state.take(np.zeros(n, dtype=np.intp))

    def encode_contexts(self, contexts: Sequence[Sequence[int]], train: bool = False, rng=None) -> LmState:
        """Final state after ``<BOS> + a`` for each context ``a``."""
        seqs = [[BOS_ID, *a] for a in contexts]
        inputs, lengths = pad_batch(seqs)
        _, state = self.unroll(inputs, self.zero_state(len(seqs)), lengths=lengths, train=train, rng=rng)
        return state

    def continuation_log_probs(self, sentences: Sequence[Sequence[int]], init: LmState,
                               train: bool = False, rng=None) -> Tensor:
        """``log p(b + <EOS> | init)`` for each row; ``init`` must have one row per sentence."""
        n = len(sentences)
        if init.rows != n:
            raise ValueError(f"init state has {init.rows} rows for {n} sentences")
        if any(len(s) == 0 for s in sentences):
            raise ValueError("cannot score an empty sentence")
        inputs, lengths = pad_batch(sentences)
        T = inputs.shape[0]
        tops, _ = self.unroll(inputs, init, train=train, rng=rng)
        # prediction k comes from the state before token k; k = len is the <EOS> step
        all_tops = ad.stack([init.h[-1], *tops], axis=0)  # (T+1, N, H)
        targets = np.full((T + 1, n), -1, dtype=np.intp)
        targets[:T] = np.where(np.arange(T)[:, None] < lengths[None, :], inputs, -1)
        targets[lengths, np.arange(n)] = EOS_ID
        step, col = np.nonzero(targets >= 0)
        flat = ad.reshape(all_tops, ((T + 1) * n, -1))
        rows = ad.take_rows(flat, step * n + col)
        logp = self.output_log_probs(rows, train, rng)
        picked = ad.pick(logp, targets[step, col])
        return ad.segment_sum(picked, col, n)

    # -- persistence -------------------------------------------------------

    def manifest(self) -> dict:
        return {"model": {"kind": self.kind, "config": asdict(self.config)}}

    def save(self, directory: str | os.PathLike, **extra) -> None:
        meta = self.manifest()
        meta.update(extra)
        save_arrays(directory, {k: p.data for k, p in self.params.items()}, meta)


def load_model(directory: str | os.PathLike):
    """Load a saved model, returning ``(model, manifest)``."""
    arrays, manifest = load_arrays(directory)
    model_meta = manifest.get("model", {})
    kind = model_meta.get("kind")
    if kind == "lm":
        return LanguageModel(LmConfig(**model_meta["config"]), params=arrays), manifest
    if kind == "bilm":
        from .noise import BiLm, BiLmConfig

        return BiLm(BiLmConfig(**model_meta["config"]), params=arrays), manifest
    raise ValueError(f"{directory}: unknown model kind {kind!r}")
