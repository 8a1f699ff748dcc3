"""Whitespace/punctuation tokenizer and vocabulary."""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, OOV, PSEUDO = 0, 1, 2
RESERVED = ("<pad>", "<oov>", "<pseudo>")
DEFAULT_MAX_LEN = 32

STOPWORDS = frozenset(
    """a an the of in on at to for with and or is are was be by from into that this
    it its as near under over behind beside next some very""".split()
)

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def normalize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    stopwords: frozenset = STOPWORDS
    index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:3]) != RESERVED:
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index and self.index[token] >= 3

    def id(self, token: str) -> int:
        return self.index.get(token, OOV)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        return cls(tuple(lines))


def build_vocab(corpus: Sequence[str], min_count: int = 1,
                extra: Iterable[str] = ()) -> Vocabulary:
    """Frequency-descending, then lexicographic, id assignment.

    ``extra`` tokens (prompt and template words) are appended after the
    corpus tokens when not already present.
    """
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for text in corpus for tok in normalize(text))
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    seen = set(kept)
    tail = sorted({t for e in extra for t in normalize(e)} - seen)
    return Vocabulary(RESERVED + tuple(kept) + tuple(tail))


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def pseudo_slots(self) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.ids) if t == PSEUDO)

    def __add__(self, other: "TokenSeq") -> "TokenSeq":
        return TokenSeq(self.ids + other.ids)


def tokenize(text: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> TokenSeq:
    return TokenSeq(tuple(vocab.id(t) for t in normalize(text))[:max_len])


def detokenize(seq: TokenSeq, vocab: Vocabulary) -> str:
    return " ".join(vocab.tokens[i] for i in seq.ids)


def pad_batch(seqs: Sequence[TokenSeq]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence; returns ``(ids, mask)``."""
    if not seqs:
        raise ValueError("empty batch")
    L = max(len(s) for s in seqs)
    if L == 0:
        raise ValueError("cannot encode an empty sequence")
    ids = np.zeros((len(seqs), L), dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        if len(s) == 0:
            raise ValueError(f"sequence {i} is empty")
        ids[i, : len(s)] = s.ids
        mask[i, : len(s)] = True
    return ids, mask
