"""Tokenization, vocabulary, sentence pairs, splitting and ABC segmentation."""

from __future__ import annotations

import hashlib
import json
import os
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .serialize import atomic_write_text

UNK, MASK, BOS, EOS, PAD = "<UNK>", "<MASK>", "<BOS>", "<EOS>", "<PAD>"
SPECIALS = (UNK, MASK, BOS, EOS, PAD)
UNK_ID, MASK_ID, BOS_ID, EOS_ID, PAD_ID = range(5)

BAR = "|"
APOSTROPHES = ("'", "’")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch)[0] in "PS"


def _split_apostrophes(word: str) -> list[str]:
    out: list[str] = []
    buf = ""
    for ch in word:
        if ch in APOSTROPHES:
            if buf:
                out.append(buf)
            out.append(ch)
            buf = ""
        else:
            buf += ch
    if buf:
        out.append(buf)
    return out


def tokenize(text: str) -> list[str]:
    """Lowercase word tokenizer: whitespace split, edge punctuation detached, apostrophes split.

    >>> tokenize("Don't stop")
    ['don', "'", 't', 'stop']
    """
    tokens: list[str] = []
    for chunk in text.split():
        if chunk in SPECIALS:
            tokens.append(chunk)
            continue
        chunk = chunk.lower()
        lead: list[str] = []
        trail: list[str] = []
        while chunk and _is_punct(chunk[0]) and chunk[0] not in APOSTROPHES:
            lead.append(chunk[0])
            chunk = chunk[1:]
        while chunk and _is_punct(chunk[-1]) and chunk[-1] not in APOSTROPHES:
            trail.append(chunk[-1])
            chunk = chunk[:-1]
        tokens.extend(lead)
        tokens.extend(_split_apostrophes(chunk))
        tokens.extend(reversed(trail))
    return tokens


def split_pretokenized(text: str) -> list[str]:
    return text.split()


TOKENIZERS = {"text": tokenize, "abc": split_pretokenized}


@dataclass
class Vocabulary:
    tokens: list[str]
    cutoff: int = 3
    counts: dict[str, int] = field(default_factory=dict)
    kind: str = "text"
    counts_hash: str = ""

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise DataError("vocabulary must start with the special tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def hash(self) -> str:
        payload = json.dumps({"kind": self.kind, "tokens": self.tokens}, ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def encode_text(self, text: str) -> list[int]:
        return self.encode(TOKENIZERS[self.kind](text))

    def decode_text(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode(ids))

    def save(self, path: str | os.PathLike) -> None:
        header = {
            "cutoff": self.cutoff,
            "counts_hash": self.counts_hash,
            "kind": self.kind,
            "size": len(self.tokens),
            "vocab_hash": self.hash,
        }
        body = "\n".join(self.tokens)
        atomic_write_text(path, json.dumps(header, sort_keys=True) + "\n" + body + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        try:
            header = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: vocabulary header is not JSON") from exc
        tokens = [t for t in lines[1:] if t != ""]
        vocab = cls(tokens, cutoff=header["cutoff"], kind=header.get("kind", "text"),
                    counts_hash=header.get("counts_hash", ""))
        if "vocab_hash" in header and header["vocab_hash"] != vocab.hash:
            raise DataError(f"{path}: vocabulary hash does not match its token list")
        return vocab


def build_vocabulary(sentences: Iterable[Sequence[str]], cutoff: int = 3, kind: str = "text") -> Vocabulary:
    """Keep tokens seen strictly more than ``cutoff`` times; specials take ids 0..4."""
    counts = Counter(t for s in sentences for t in s if t not in SPECIALS)
    kept = sorted((t for t, n in counts.items() if n > cutoff), key=lambda t: (-counts[t], t))
    digest = hashlib.sha256(
        json.dumps(sorted(counts.items()), ensure_ascii=False).encode("utf-8")
    ).hexdigest()[:16]
    return Vocabulary(list(SPECIALS) + kept, cutoff=cutoff, counts={t: counts[t] for t in kept},
                      kind=kind, counts_hash=digest)


@dataclass(frozen=True)
class Document:
    doc_id: str
    sentences: tuple[tuple, ...]


@dataclass(frozen=True)
class SentencePair:
    a: tuple[int, ...]
    b: tuple[int, ...]
    doc_id: str = ""

    def to_json(self) -> dict:
        return {"doc": self.doc_id, "a": list(self.a), "b": list(self.b)}

    @classmethod
    def from_json(cls, rec: dict) -> "SentencePair":
        return cls(tuple(rec["a"]), tuple(rec["b"]), str(rec.get("doc", "")))


def make_pairs(documents: Iterable[Document]) -> list[SentencePair]:
    pairs = []
    for doc in documents:
        sents = [tuple(s) for s in doc.sentences if len(s) > 0]
        for a, b in zip(sents, sents[1:]):
            pairs.append(SentencePair(a, b, doc.doc_id))
    return pairs


def segment_abc(tune: Sequence[str], bars_per_sentence: int = 4, bar: str = BAR) -> list[list[str]]:
    """Cut a tokenized tune into sentences of ``bars_per_sentence`` bars.

    A bar is a run of tokens closed by ``bar``. Tokens after the last bar
    token stay with the final sentence; a short trailing segment is kept.
    """
    bars: list[list[str]] = []
    cur: list[str] = []
    for tok in tune:
        cur.append(tok)
        if tok == bar:
            bars.append(cur)
            cur = []
    if not bars:
        return []
    if cur:
        bars[-1].extend(cur)
    out = []
    for i in range(0, len(bars), bars_per_sentence):
        out.append([t for b in bars[i : i + bars_per_sentence] for t in b])
    return out


def read_text_corpus(path: str | os.PathLike) -> list[Document]:
    """One sentence per line, blank line between documents."""
    docs: list[Document] = []
    cur: list[tuple[str, ...]] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                if cur:
                    docs.append(Document(f"d{len(docs):06d}", tuple(cur)))
                    cur = []
                continue
            toks = tokenize(line)
            if toks:
                cur.append(tuple(toks))
    if cur:
        docs.append(Document(f"d{len(docs):06d}", tuple(cur)))
    return docs


def read_abc_corpus(path: str | os.PathLike, bars_per_sentence: int = 4) -> list[Document]:
    """One pre-tokenized tune per line."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            toks = line.split()
            if not toks:
                continue
            sents = segment_abc(toks, bars_per_sentence)
            docs.append(Document(f"t{len(docs):06d}", tuple(tuple(s) for s in sents)))
    return docs


SPLIT_NAMES = ("train", "valid", "holdout")


def assign_split(doc_id: str, seed: int, ratios: Sequence[float] = (8, 1, 1)) -> str:
    """Stable document-level assignment from a hash of (seed, doc_id)."""
    digest = hashlib.sha256(f"{seed}:{doc_id}".encode("utf-8")).digest()
    u = int.from_bytes(digest[:8], "big") / 2.0**64
    total = float(sum(ratios))
    acc = 0.0
    for name, r in zip(SPLIT_NAMES, ratios):
        acc += r / total
        if u < acc:
            return name
    return SPLIT_NAMES[-1]


@dataclass
class CorpusSplit:
    train: list[Document]
    valid: list[Document]
    holdout: list[Document]
    ratios: tuple[float, ...] = (8, 1, 1)

    def parts(self) -> dict[str, list[Document]]:
        return {"train": self.train, "valid": self.valid, "holdout": self.holdout}


def split_documents(docs: Iterable[Document], seed: int, ratios: Sequence[float] = (8, 1, 1)) -> CorpusSplit:
    parts: dict[str, list[Document]] = {n: [] for n in SPLIT_NAMES}
    for d in docs:
        parts[assign_split(d.doc_id, seed, ratios)].append(d)
    return CorpusSplit(parts["train"], parts["valid"], parts["holdout"], tuple(ratios))


def encode_documents(docs: Iterable[Document], vocab: Vocabulary) -> list[Document]:
    return [Document(d.doc_id, tuple(tuple(vocab.encode(s)) for s in d.sentences)) for d in docs]


def save_pairs(path: str | os.PathLike, pairs: Iterable[SentencePair]) -> None:
    atomic_write_text(path, "".join(json.dumps(p.to_json(), separators=(",", ":")) + "\n" for p in pairs))


def load_pairs(path: str | os.PathLike) -> list[SentencePair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                pairs.append(SentencePair.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad pair record ({exc})") from exc
    return pairs
