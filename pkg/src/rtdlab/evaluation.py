"""Synthetic composed-retrieval benchmark, Recall@K / mAP@K, and discrepancy probes."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import DualEncoder, EncoderParams, VisualSurrogate, encode_texts, save_params, synth_image_embed
from .grammar import GrammarConfig, Tuple3
from .autodiff import Tensor
from .projection import PhiParams, encode_prompts
from .text import Vocabulary, tokenize
from .triplets import TemplateSet

RECALL_KS = (1, 5, 10, 50)
MAP_KS = (5, 10, 25, 50)
MODES = ("frozen", "rtd", "ideal", "image")


# ---------------------------------------------------------------- metrics

def _check_k(K: int, n: int) -> int:
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if K > n:
        warnings.warn(f"K={K} exceeds ranking length {n}; clamping", stacklevel=3)
        return n
    return K


def recall_at_k(ranking: Sequence[int], positives: Iterable[int], K: int) -> float:
    """1.0 if any positive id appears in the first ``K`` ranks."""
    K = _check_k(K, len(ranking))
    pos = set(positives)
    return float(any(r in pos for r in ranking[:K]))


def map_at_k(ranking: Sequence[int], positives: Iterable[int], K: int) -> float:
    """Average precision truncated at ``K``, normalised by ``min(|positives|, K)``."""
    pos = set(positives)
    if not pos:
        raise ValueError("average precision needs at least one positive")
    K = _check_k(K, len(ranking))
    hits, total = 0, 0.0
    for i, r in enumerate(ranking[:K], start=1):
        if r in pos:
            hits += 1
            total += hits / i
    return total / min(len(pos), K)


def mean_recall_at_k(rankings, positives, K: int) -> float:
    return float(np.mean([recall_at_k(r, p, K) for r, p in zip(rankings, positives)]))


def mean_map_at_k(rankings, positives, K: int) -> float:
    return float(np.mean([map_at_k(r, p, K) for r, p in zip(rankings, positives)]))


def rank_gallery(query: np.ndarray, gallery: np.ndarray, ids: np.ndarray,
                 exclude: int | None = None) -> np.ndarray:
    """Gallery ids by descending cosine; ties go to the smaller id."""
    g = gallery / np.linalg.norm(gallery, axis=1, keepdims=True)
    scores = g @ (query / np.linalg.norm(query))
    order = np.lexsort((ids, -scores))
    ranked = ids[order]
    if exclude is not None:
        ranked = ranked[ranked != exclude]
    return ranked


# ---------------------------------------------------------------- benchmark

@dataclass
class Query:
    reference_id: int
    t_r: str
    t_c: str
    t_t: str
    positives: frozenset
    target: Tuple3


@dataclass
class SyntheticBenchmark:
    ids: np.ndarray
    embeddings: np.ndarray
    captions: list[str]
    tuples: list[Tuple3]
    queries: list[Query]
    seed: int
    grammar: GrammarConfig

    def __post_init__(self):
        known = set(int(i) for i in self.ids)
        for q in self.queries:
            if not q.positives or not q.positives <= known:
                raise ValueError("query positives must be non-empty gallery ids")

    @property
    def multi_positive_fraction(self) -> float:
        return float(np.mean([len(q.positives) > 1 for q in self.queries]))

    def image(self, image_id: int) -> np.ndarray:
        return self.embeddings[int(np.searchsorted(self.ids, image_id))]


def build_synthetic_benchmark(grammar: GrammarConfig, frozen: EncoderParams, surrogate: VisualSurrogate,
                              vocab: Vocabulary, templates: TemplateSet, rng: np.random.Generator,
                              n_gallery: int = 500, n_queries: int = 200, seed: int = 0,
                              min_multi: float = 0.1, max_tries: int = 100) -> SyntheticBenchmark:
    """Gallery of surrogate images plus one-keyword-swap queries with known targets."""
    tuples = grammar.sample_tuples(n_gallery, rng)
    captions = [grammar.caption(t) for t in tuples]
    # per-image noise: each gallery item is its own "photo"
    emb = synth_image_embed(frozen, [tokenize(c, vocab, frozen.max_len) for c in captions], surrogate, rng)
    by_tuple: dict[Tuple3, list[int]] = {}
    for i, t in enumerate(tuples):
        by_tuple.setdefault(t, []).append(i)
    rep_ids = templates.replacement_ids
    slots = grammar.slots
    queries, seen = [], set()
    attempts = 0
    while len(queries) < n_queries:
        attempts += 1
        if attempts > max_tries * n_queries:
            raise ValueError(
                f"grammar too small: only {len(queries)} of {n_queries} distinct queries found"
            )
        ref = int(rng.integers(n_gallery))
        slot = int(rng.integers(3))
        rt = tuples[ref]
        options = []
        for v in range(len(slots[slot])):
            if v == rt[slot]:
                continue
            tt = list(rt)
            tt[slot] = v
            if tuple(tt) in by_tuple:
                options.append(tuple(tt))
        if not options:
            continue
        target = options[int(rng.integers(len(options)))]
        tid = rep_ids[int(rng.integers(len(rep_ids)))]
        src, tgt = slots[slot][rt[slot]], slots[slot][target[slot]]
        key = (ref, target)
        if key in seen:
            continue
        seen.add(key)
        queries.append(Query(ref, captions[ref], templates.render(tid, src, tgt),
                             grammar.caption(target), frozenset(by_tuple[target]), target))
    bench = SyntheticBenchmark(np.arange(n_gallery), emb, captions, tuples, queries, seed, grammar)
    if bench.multi_positive_fraction < min_multi:
        raise ValueError(f"only {bench.multi_positive_fraction:.0%} of queries have several positives")
    return bench


# ---------------------------------------------------------------- reports

@dataclass
class RetrievalReport:
    mode: str
    recall: dict[int, float]
    map: dict[int, float]
    n_queries: int

    @property
    def average(self) -> float:
        """Mean of R@1, R@5, R@10, mAP@5, mAP@10 and mAP@25."""
        vals = [self.recall[k] for k in (1, 5, 10)] + [self.map[k] for k in (5, 10, 25)]
        return float(np.mean(vals))

    def rows(self) -> list[tuple[str, str, int, float]]:
        out = [(self.mode, "recall", k, v) for k, v in sorted(self.recall.items())]
        out += [(self.mode, "map", k, v) for k, v in sorted(self.map.items())]
        return out


def format_report(reports: Sequence[RetrievalReport]) -> str:
    lines = ["mode\tmetric\tk\tvalue"]
    for r in reports:
        lines += [f"{m}\t{name}\t{k}\t{v:.6f}" for m, name, k, v in r.rows()]
    return "\n".join(lines) + "\n"


def score_queries(q_emb: np.ndarray, bench: SyntheticBenchmark, mode: str,
                  recall_ks=RECALL_KS, map_ks=MAP_KS) -> RetrievalReport:
    rankings = [rank_gallery(q_emb[i], bench.embeddings, bench.ids, exclude=q.reference_id)
                for i, q in enumerate(bench.queries)]
    pos = [q.positives for q in bench.queries]
    return RetrievalReport(
        mode,
        {k: mean_recall_at_k(rankings, pos, k) for k in recall_ks},
        {k: mean_map_at_k(rankings, pos, k) for k in map_ks},
        len(bench.queries),
    )


def composed_queries(params: EncoderParams, phi: PhiParams, bench: SyntheticBenchmark,
                     vocab: Vocabulary) -> np.ndarray:
    """``a photo of [phi(reference image)] that T_c`` under ``params``; no noise."""
    refs = np.stack([bench.image(q.reference_id) for q in bench.queries])
    conds = [tokenize(q.t_c, vocab, params.max_len) for q in bench.queries]
    out = []
    for s in range(0, len(refs), 256):
        out.append(encode_prompts(params, phi, refs[s:s + 256], conds[s:s + 256], vocab).data)
    return np.concatenate(out)


def query_embeddings(dual: DualEncoder, phi: PhiParams, bench: SyntheticBenchmark, mode: str,
                     vocab: Vocabulary) -> np.ndarray:
    if mode == "frozen":
        return composed_queries(dual.frozen, phi, bench, vocab)
    if mode == "rtd":
        return composed_queries(dual.learnable, phi, bench, vocab)
    if mode == "ideal":
        return encode_texts(dual.frozen, [tokenize(q.t_t, vocab) for q in bench.queries])
    if mode == "image":
        return np.stack([bench.image(q.reference_id) for q in bench.queries])
    raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")


def evaluate_cir(dual: DualEncoder, phi: PhiParams, bench: SyntheticBenchmark, mode: str,
                 vocab: Vocabulary) -> RetrievalReport:
    return score_queries(query_embeddings(dual, phi, bench, mode, vocab), bench, mode)


def discrepancy_probe_t2i(params: EncoderParams, bench: SyntheticBenchmark, vocab: Vocabulary,
                          label: str, query: str = "concat") -> RetrievalReport:
    """Text-only retrieval: ``T_r + " " + T_c`` (or the ideal ``T_t``) through ``params``."""
    if query == "concat":
        texts = [q.t_r + " " + q.t_c for q in bench.queries]
    elif query == "target":
        texts = [q.t_t for q in bench.queries]
    else:
        raise ValueError("query must be 'concat' or 'target'")
    q_emb = encode_texts(params, [tokenize(t, vocab, params.max_len) for t in texts])
    return score_queries(q_emb, bench, label)


def avg_cosine_probe(dual: DualEncoder, phi: PhiParams, bench: SyntheticBenchmark,
                     vocab: Vocabulary) -> tuple[float, float]:
    """Mean cosine between composed queries and the mean positive image, frozen vs learnable."""
    centers = np.stack([
        np.mean([bench.image(i) for i in sorted(q.positives)], axis=0) for q in bench.queries
    ])
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    out = []
    for params in (dual.frozen, dual.learnable):
        q = composed_queries(params, phi, bench, vocab)
        out.append(float(np.mean(np.sum(q * centers, axis=1))))
    return out[0], out[1]


def save_gallery(bench: SyntheticBenchmark, path) -> None:
    save_params({"ids": Tensor(bench.ids.astype(np.float64)), "embeddings": Tensor(bench.embeddings)}, path)
