"""Rule-based text triplets ``(T_r, T_c, T_t)``: keyword swap + template, then probe filtering."""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .encoder import EncoderParams, encode_texts
from .projection import NoiseConfig, PhiParams, encode_prompts, inject_noise
from .rng import item_rng
from .text import STOPWORDS, Vocabulary, normalize, tokenize

N_TEMPLATES = 50
_SRC, _TGT = "${source}", "${target}"


class TripletError(ValueError):
    pass


@dataclass(frozen=True)
class TextTriplet:
    t_r: str
    t_c: str
    t_t: str
    source_keyword: str
    target_keyword: str
    template_id: int


@dataclass(frozen=True)
class TemplateSet:
    templates: tuple[str, ...]

    def __post_init__(self):
        if len(self.templates) != N_TEMPLATES:
            raise TripletError(f"expected {N_TEMPLATES} templates, got {len(self.templates)}")
        for i, t in enumerate(self.templates):
            if _SRC not in t and _TGT not in t:
                raise TripletError(f"template {i} has no placeholder: {t!r}")

    def __len__(self) -> int:
        return len(self.templates)

    def __getitem__(self, i: int) -> str:
        return self.templates[i]

    def is_removal(self, i: int) -> bool:
        t = self.templates[i]
        return _SRC in t and _TGT not in t

    def render(self, i: int, source: str, target: str) -> str:
        return self.templates[i].replace(_SRC, source).replace(_TGT, target)

    @property
    def replacement_ids(self) -> list[int]:
        return [i for i in range(len(self)) if not self.is_removal(i)]

    @classmethod
    def load(cls, path=None) -> "TemplateSet":
        if path is None:
            text = resources.files("rtdlab").joinpath("data/templates.txt").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


def apply_edit(caption: str, source: str, target: str, removal: bool) -> str:
    """Swap (or delete) whole-word occurrences of ``source`` in ``caption``."""
    pat = re.compile(rf"\b{re.escape(source)}\b", flags=re.IGNORECASE)
    if removal:
        return " ".join(pat.sub(" ", caption).split())
    return pat.sub(target, caption)


@dataclass
class KeywordStats:
    counts: dict[str, int]
    min_freq: int
    eligible: frozenset = field(init=False)

    def __post_init__(self):
        self.eligible = frozenset(k for k, c in self.counts.items() if c > self.min_freq)


def extract_keywords(corpus: Sequence[str], stopwords=STOPWORDS, min_freq: int = 3) -> KeywordStats:
    counts = Counter(t for text in corpus for t in normalize(text) if t not in stopwords)
    return KeywordStats(dict(sorted(counts.items())), min_freq)


def keyword_embeddings(frozen: EncoderParams, keywords, vocab: Vocabulary) -> dict[str, np.ndarray]:
    kws = sorted(keywords)
    embs = encode_texts(frozen, [tokenize(k, vocab, frozen.max_len) for k in kws])
    return {k: embs[i] for i, k in enumerate(kws)}


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def find_replacements(keyword: str, embeddings: Mapping[str, np.ndarray], lo: float = 0.5,
                      hi: float = 0.7) -> list[tuple[str, float]]:
    """Other keywords whose cosine to ``keyword`` falls in ``[lo, hi]``, best first."""
    if keyword not in embeddings:
        raise KeyError(f"keyword {keyword!r} has no embedding")
    if not (0 <= lo <= hi <= 1):
        raise ValueError(f"invalid similarity band [{lo}, {hi}]")
    base = embeddings[keyword]
    out = []
    for k in sorted(embeddings):
        if k == keyword:
            continue
        s = _cos(base, embeddings[k])
        if lo <= s <= hi:
            out.append((k, s))
    out.sort(key=lambda p: (-p[1], p[0]))
    return out


def generate_triplets(corpus: Sequence[str], templates: TemplateSet, stats: KeywordStats,
                      embeddings: Mapping[str, np.ndarray], seed: int, n: int,
                      band: tuple[float, float] = (0.5, 0.7)) -> list[TextTriplet]:
    """Draw ``n`` triplets; item ``i`` uses its own stream derived from ``(seed, i)``."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return []
    emb = {k: v for k, v in embeddings.items() if k in stats.eligible}
    if not emb:
        raise TripletError("no eligible keywords: every keyword is at or below min_freq")
    bands = {k: [c for c, _ in find_replacements(k, emb, *band)] for k in sorted(emb)}
    usable = {k for k, c in bands.items() if c}
    if not usable:
        raise TripletError(f"every eligible keyword has an empty similarity band {band}")
    candidates = []
    for ci, cap in enumerate(corpus):
        kws = sorted({t for t in normalize(cap) if t in usable})
        if kws:
            candidates.append((ci, kws))
    if not candidates:
        raise TripletError("no caption contains a keyword with a non-empty replacement band")
    out = []
    for i in range(n):
        r = item_rng(seed, "triplet", i)
        ci, kws = candidates[r.integers(len(candidates))]
        src = kws[r.integers(len(kws))]
        tgt = bands[src][r.integers(len(bands[src]))]
        tid = int(r.integers(len(templates)))
        t_r = corpus[ci]
        t_t = apply_edit(t_r, src, tgt, templates.is_removal(tid))
        out.append(TextTriplet(t_r, templates.render(tid, src, tgt), t_t, src, tgt, tid))
    return out


def probe_similarity(captions: Sequence[str], frozen: EncoderParams, phi: PhiParams,
                     noise: NoiseConfig, vocab: Vocabulary, seed: int = 0) -> np.ndarray:
    """cos(text, ``a photo of [phi(noised text)]``) per caption, all under the frozen encoder.

    Noise for caption ``c`` is drawn from a stream keyed by its text, so a
    caption always gets the same score.
    """
    if not captions:
        return np.zeros(0)
    seqs = [tokenize(c, vocab, frozen.max_len) for c in captions]
    t = encode_texts(frozen, seqs)
    noised = np.stack([
        inject_noise(t[i], noise, item_rng(seed, "filter:" + c, 0)) for i, c in enumerate(captions)
    ])
    out = []
    for s in range(0, len(captions), 256):
        p = encode_prompts(frozen, phi, noised[s:s + 256], [None] * len(noised[s:s + 256]), vocab).data
        out.append(np.sum(p * t[s:s + 256], axis=1))
    return np.concatenate(out)


def filter_triplets(triplets: Sequence[TextTriplet], frozen: EncoderParams, phi: PhiParams,
                    noise: NoiseConfig, vocab: Vocabulary, threshold: float = 0.75,
                    seed: int = 0) -> list[TextTriplet]:
    """Keep triplets whose reference and target captions both pass the probe."""
    caps = sorted({x for tr in triplets for x in (tr.t_r, tr.t_t)})
    sims = dict(zip(caps, probe_similarity(caps, frozen, phi, noise, vocab, seed)))
    return [tr for tr in triplets if sims[tr.t_r] >= threshold and sims[tr.t_t] >= threshold]


# ---------------------------------------------------------------- TSV io

def save_triplets(triplets: Sequence[TextTriplet], path) -> None:
    lines = []
    for i, tr in enumerate(triplets):
        cells = [tr.t_r, tr.t_c, tr.t_t, str(tr.template_id),
                 f"{tr.source_keyword}→{tr.target_keyword}"]
        for c in cells:
            if "\t" in c or "\n" in c or "\r" in c:
                raise TripletError(f"triplet {i}: field contains a tab or newline: {c!r}")
        lines.append("\t".join(cells) + "\n")
    Path(path).write_text("".join(lines), encoding="utf-8", newline="\n")


def load_triplets(path) -> list[TextTriplet]:
    text = Path(path).read_text(encoding="utf-8")
    out = []
    for ln, line in enumerate(text.split("\n"), start=1):
        if line == "":
            continue
        cells = line.split("\t")
        if len(cells) != 5:
            raise TripletError(f"{path}:{ln}: expected 5 tab-separated fields, got {len(cells)}")
        pair = cells[4].split("→")
        if len(pair) != 2:
            raise TripletError(f"{path}:{ln}: malformed keyword pair {cells[4]!r}")
        try:
            tid = int(cells[3])
        except ValueError:
            raise TripletError(f"{path}:{ln}: template id {cells[3]!r} is not an integer") from None
        out.append(TextTriplet(cells[0], cells[1], cells[2], pair[0], pair[1], tid))
    return out
