"""Synthetic ABC-style tune corpus with sentence-to-sentence structure.

Each tune keeps one octave register and one key throughout. The melody is a
walk over the key's major scale inside the register, moving one or two scale
steps at a time and carrying on across bar lines and segment boundaries, with
a little chromatic noise that stays in the register. Each tune also keeps one
note density (notes per bar) and draws every bar's rhythm from that density's
patterns, so segment lengths vary widely between tunes. Every four-bar
segment sits under one phrase slur, so each sentence opens with ``(`` and
closes with ``)`` before its last bar line.
"""

from __future__ import annotations

import os
from typing import Iterator

import numpy as np

from .serialize import atomic_write_text

# three octaves of chromatic pitches in ABC spelling, low to high
_OCTAVE = ["C", "^C", "D", "^D", "E", "F", "^F", "G", "^G", "A", "^A", "B"]
PITCHES = [n + "," for n in _OCTAVE] + _OCTAVE + [n.lower() for n in _OCTAVE]
REGISTERS = 3
MAJOR = (0, 2, 4, 5, 7, 9, 11)
KEYS = 12
# bar rhythms (note lengths in eighths, four per bar) keyed by notes per bar
RHYTHMS = {
    2: [(2, 2), (3, 1), (1, 3)],
    3: [(2, 1, 1), (1, 1, 2), (1, 2, 1)],
    4: [(1, 1, 1, 1)],
}
LENGTH_SUFFIX = {1: "", 2: "2", 3: "3", 4: "4"}
# melodic moves in scale steps
STEPS = (-2, -1, 1, 2)


def scale_pitches(key: int, register: int) -> list[int]:
    cls = {(key + s) % 12 for s in MAJOR}
    return [12 * register + c for c in range(12) if c in cls]


def generate_tune(rng: np.random.Generator, min_segments: int = 4, max_segments: int = 6,
                  chromatic_prob: float = 0.05) -> list[str]:
    register = int(rng.integers(REGISTERS))
    key = int(rng.integers(KEYS))
    pool = scale_pitches(key, register)
    tonic = pool.index(12 * register + key)
    patterns = RHYTHMS[int(rng.choice(list(RHYTHMS)))]
    idx = int(rng.integers(len(pool)))
    tokens: list[str] = []
    for _ in range(int(rng.integers(min_segments, max_segments + 1))):
        tokens.append("(")
        for bar in range(4):
            for length in patterns[int(rng.integers(len(patterns)))]:
                idx += int(rng.choice(STEPS))
                # reflect off the ends of the register
                if idx < 0:
                    idx = -idx
                elif idx >= len(pool):
                    idx = 2 * (len(pool) - 1) - idx
                if rng.random() < chromatic_prob:
                    pitch = 12 * register + int(rng.integers(12))
                else:
                    pitch = pool[idx]
                tokens.append(PITCHES[pitch] + LENGTH_SUFFIX[length])
            if bar == 3:
                tokens.append(")")
            tokens.append("|")
    return tokens


def generate_corpus(n_tunes: int, seed: int = 0, **kwargs) -> Iterator[list[str]]:
    rng = np.random.default_rng(seed)
    for _ in range(n_tunes):
        yield generate_tune(rng, **kwargs)


def write_corpus(path: str | os.PathLike, n_tunes: int = 1400, seed: int = 0, **kwargs) -> None:
    """One pre-tokenized tune per line, tokens separated by spaces."""
    atomic_write_text(path, "".join(" ".join(t) + "\n" for t in generate_corpus(n_tunes, seed, **kwargs)))
