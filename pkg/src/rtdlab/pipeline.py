"""End-to-end orchestration: world construction, stages, ablation grid, run manifests."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import (DualEncoder, EncoderParams, VisualSurrogate, load_encoder, load_params, save_params,
                      self_align)
from .evaluation import (RetrievalReport, SyntheticBenchmark, avg_cosine_probe, build_synthetic_benchmark,
                         discrepancy_probe_t2i, evaluate_cir, format_report)
from .grammar import GrammarConfig
from .projection import NoiseConfig, PhiParams, PhiTrainConfig, pretrain_phi
from .rng import rng_stream
from .text import Vocabulary, build_vocab, tokenize
from .training import PairMode, TrainConfig, TrainResult, TripletTable, train_naive, train_rtd
from .triplets import (TemplateSet, TextTriplet, extract_keywords, filter_triplets, generate_triplets,
                       keyword_embeddings)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run, flat so it maps onto ``key=value`` config files."""

    seed: int = 0
    # world
    n_subjects: int = 20
    n_attributes: int = 5
    n_contexts: int = 10
    affinity: float = 0.8
    corpus_size: int = 1000
    pretrain_size: int = 4000
    d: int = 64
    max_len: int = 32
    align_steps: int = 300
    align_batch: int = 64
    align_lr: float = 3e-3
    align_tau: float = 0.5
    align_drop: float = 0.3
    gap_norm: float = 0.5
    sigma_img: float = 0.02
    # projection
    phi_steps: int = 400
    phi_batch: int = 64
    phi_lr: float = 3e-3
    phi_depth: int = 2
    # triplets
    min_freq: int = 3
    band_lo: float = 0.5
    band_hi: float = 0.7
    n_triplets: int = 4000
    filter_threshold: float = 0.75
    # rtd training
    tau: float = 0.07
    lr: float = 3e-3
    weight_decay: float = 0.01
    batch_size: int = 192
    steps: int = 2000
    noise_kind: str = "product"
    noise_scale: float = 0.1
    use_rb: bool = True
    use_rc: bool = True
    use_anchor: bool = True
    pair_mode: str = "triplet"
    update_mask: str = "full"
    reference_rc: str = "prompt"
    # benchmark
    n_gallery: int = 500
    n_queries: int = 200

    def __post_init__(self):
        if self.corpus_size < 2 or self.pretrain_size < 2:
            raise ValueError("corpus sizes must be >= 2")
        if not 0 <= self.filter_threshold <= 1:
            raise ValueError("filter_threshold must lie in [0, 1]")
        # fail at load time rather than at the training stage
        self.train_config()
        self.grammar()

    def grammar(self) -> GrammarConfig:
        return GrammarConfig(self.n_subjects, self.n_attributes, self.n_contexts, self.affinity)

    @property
    def noise(self) -> NoiseConfig:
        return NoiseConfig(self.noise_kind, self.noise_scale)

    def train_config(self, **overrides) -> TrainConfig:
        base = dict(tau=self.tau, lr=self.lr, weight_decay=self.weight_decay, batch_size=self.batch_size,
                    steps=self.steps, noise=self.noise, use_rb=self.use_rb, use_rc=self.use_rc,
                    use_anchor=self.use_anchor, pair_mode=PairMode(self.pair_mode),
                    update_mask=self.update_mask, reference_rc=self.reference_rc, seed=self.seed)
        return TrainConfig(**{**base, **overrides})

    def phi_config(self) -> PhiTrainConfig:
        return PhiTrainConfig(self.phi_steps, self.phi_batch, self.phi_lr, self.tau, self.phi_depth)

    def items(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


def parse_value(key: str, raw: str):
    """Convert ``raw`` to the type of ``RunConfig.<key>``; unknown keys raise ``KeyError``."""
    types = {f.name: f.type for f in fields(RunConfig)}
    if key not in types:
        raise KeyError(key)
    t = types[key]
    if t == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if t == "int":
        return int(raw)
    if t == "float":
        return float(raw)
    return raw.strip()


def read_config_file(path) -> dict:
    """UTF-8 ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{ln}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            out[k] = parse_value(k, v)
        except KeyError:
            raise ValueError(f"{path}:{ln}: unknown config key {k!r}") from None
    return out


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in cfg.items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


# ---------------------------------------------------------------- world

PROMPT_WORDS = "a photo of that"


@dataclass
class World:
    cfg: RunConfig
    grammar: GrammarConfig
    templates: TemplateSet
    vocab: Vocabulary
    corpus: list[str]
    frozen: EncoderParams
    surrogate: VisualSurrogate
    align_curve: list[float]


def world_vocab(cfg: RunConfig, corpus: Sequence[str], templates: TemplateSet) -> Vocabulary:
    g = cfg.grammar()
    every = [g.caption(t) for t in g.all_tuples()]
    return build_vocab(every + list(corpus), extra=list(templates.templates) + [PROMPT_WORDS])


def build_world(cfg: RunConfig, corpus: Sequence[str] | None = None,
                templates: TemplateSet | None = None) -> World:
    """Vocabulary, self-aligned frozen encoder and visual surrogate for ``cfg.seed``."""
    g = cfg.grammar()
    templates = templates or TemplateSet.load()
    if corpus is None:
        corpus = g.sample_corpus(cfg.corpus_size, rng_stream(cfg.seed, "corpus"))
    corpus = list(corpus)
    vocab = world_vocab(cfg, corpus, templates)
    frozen = EncoderParams.init(len(vocab), cfg.d, cfg.max_len, rng_stream(cfg.seed, "init"))
    pre = [tokenize(c, vocab, cfg.max_len) for c in g.sample_corpus(cfg.pretrain_size, rng_stream(cfg.seed, "pre"))]
    curve = self_align(frozen, pre, steps=cfg.align_steps, batch_size=cfg.align_batch, lr=cfg.align_lr,
                       tau=cfg.align_tau, drop=cfg.align_drop, rng=rng_stream(cfg.seed, "align"))
    surrogate = VisualSurrogate.draw(cfg.d, cfg.gap_norm, cfg.sigma_img, rng_stream(cfg.seed, "gap"))
    return World(cfg, g, templates, vocab, corpus, frozen, surrogate, curve)


def train_phi(world: World) -> tuple[PhiParams, list[float]]:
    cfg = world.cfg
    caps = [tokenize(c, world.vocab, cfg.max_len) for c in world.corpus]
    res = pretrain_phi(world.frozen, caps, world.surrogate, world.vocab, cfg.phi_config(),
                       rng=rng_stream(cfg.seed, "phi"))
    return res.phi, res.curve


@dataclass
class TripletStats:
    generated: int
    kept: int
    eligible_keywords: int
    threshold: float

    @property
    def pass_rate(self) -> float:
        return self.kept / self.generated if self.generated else 0.0


def make_triplets(world: World, phi: PhiParams) -> tuple[list[TextTriplet], TripletStats]:
    cfg = world.cfg
    stats = extract_keywords(world.corpus, min_freq=cfg.min_freq)
    emb = keyword_embeddings(world.frozen, stats.eligible, world.vocab)
    raw = generate_triplets(world.corpus, world.templates, stats, emb, cfg.seed, cfg.n_triplets,
                            band=(cfg.band_lo, cfg.band_hi))
    kept = filter_triplets(raw, world.frozen, phi, cfg.noise, world.vocab, cfg.filter_threshold, cfg.seed)
    return kept, TripletStats(len(raw), len(kept), len(stats.eligible), cfg.filter_threshold)


def build_benchmark(world: World) -> SyntheticBenchmark:
    cfg = world.cfg
    return build_synthetic_benchmark(world.grammar, world.frozen, world.surrogate, world.vocab, world.templates,
                                     rng_stream(cfg.seed, "bench"), n_gallery=cfg.n_gallery,
                                     n_queries=cfg.n_queries, seed=cfg.seed)


def train_encoder(world: World, phi: PhiParams, table: TripletTable | Sequence[TextTriplet],
                  **overrides) -> tuple[DualEncoder, TrainResult]:
    dual = DualEncoder.from_frozen(world.frozen)
    res = train_rtd(dual, phi, table, world.cfg.train_config(**overrides), world.vocab)
    return dual, res


# ---------------------------------------------------------------- ablation grid

# row name -> TrainConfig overrides; None means "no training" (the frozen baseline)
ABLATION_ROWS: dict[str, dict | None] = {
    "baseline": None,
    "tcl_pair": dict(pair_mode=PairMode.REFERENCE_ONLY, use_rb=False, use_rc=False, use_anchor=True),
    "tcl": dict(pair_mode=PairMode.TRIPLET, use_rb=False, use_rc=False, use_anchor=True),
    "tcl_rb": dict(pair_mode=PairMode.TRIPLET, use_rb=True, use_rc=False, use_anchor=True),
    "tcl_rb_noanchor": dict(pair_mode=PairMode.TRIPLET, use_rb=True, use_rc=False, use_anchor=False),
    "full": dict(pair_mode=PairMode.TRIPLET, use_rb=True, use_rc=True, use_anchor=True),
}
NAIVE_ROW = "naive"


@dataclass
class AblationRow:
    name: str
    report: RetrievalReport
    losses: list[float]


def run_ablation(world: World, phi: PhiParams, triplets: Sequence[TextTriplet] | TripletTable,
                 bench: SyntheticBenchmark, rows: Sequence[str] | None = None,
                 include_naive: bool = True, trained: dict[str, DualEncoder] | None = None) -> list[AblationRow]:
    """One model per grid row plus the naive update; ``trained`` may supply finished rows."""
    table = triplets if isinstance(triplets, TripletTable) else TripletTable(triplets, world.frozen, world.vocab)
    names = list(rows) if rows is not None else list(ABLATION_ROWS)
    trained = dict(trained or {})
    out = []
    for name in names:
        if name not in ABLATION_ROWS:
            raise ValueError(f"unknown ablation row {name!r}")
        over = ABLATION_ROWS[name]
        losses: list[float] = []
        if name in trained:
            dual = trained[name]
        elif over is None:
            dual = DualEncoder.from_frozen(world.frozen)
        else:
            dual, res = train_encoder(world, phi, table, **over)
            losses = res.history
        report = evaluate_cir(dual, phi, bench, "rtd", world.vocab)
        out.append(AblationRow(name, dataclasses.replace(report, mode=name), losses))
    if include_naive:
        dual = DualEncoder.from_frozen(world.frozen)
        caps = [tokenize(c, world.vocab, world.cfg.max_len) for c in world.corpus]
        res = train_naive(dual, phi, caps, world.surrogate, world.vocab, world.cfg.train_config())
        report = evaluate_cir(dual, phi, bench, "rtd", world.vocab)
        out.append(AblationRow(NAIVE_ROW, dataclasses.replace(report, mode=NAIVE_ROW), res.history))
    return out


def format_ablation(rows: Sequence[AblationRow]) -> str:
    """One line per row: name, R@1/5/10, mAP@5/10/25 and their average; best average flagged."""
    best = max(rows, key=lambda r: r.report.average).name
    lines = ["row\tR@1\tR@5\tR@10\tmAP@5\tmAP@10\tmAP@25\tavg\tbest"]
    for r in rows:
        rep = r.report
        vals = [rep.recall[1], rep.recall[5], rep.recall[10], rep.map[5], rep.map[10], rep.map[25], rep.average]
        lines.append(r.name + "\t" + "\t".join(f"{v:.6f}" for v in vals) + ("\t*" if r.name == best else "\t"))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- artifacts

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, entries: Sequence[tuple[str, object]]) -> None:
    Path(path).write_text("".join(f"{k}={_fmt(v)}\n" for k, v in entries), encoding="utf-8", newline="\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def save_phi(phi: PhiParams, path) -> None:
    save_params(phi.named(), path)


def load_phi(path) -> PhiParams:
    return PhiParams.from_named(load_params(path))


def probe_report(world: World, phi: PhiParams, bench: SyntheticBenchmark, dual: DualEncoder,
                 pair_dual: DualEncoder | None = None) -> tuple[list[RetrievalReport], tuple[float, float]]:
    """Text-only probes (frozen / pair-updated / rtd / ideal caption) and the average-cosine probe."""
    reps = [discrepancy_probe_t2i(world.frozen, bench, world.vocab, "t2i_frozen")]
    if pair_dual is not None:
        reps.append(discrepancy_probe_t2i(pair_dual.learnable, bench, world.vocab, "t2i_pair_updated"))
    reps.append(discrepancy_probe_t2i(dual.learnable, bench, world.vocab, "t2i_rtd"))
    reps.append(discrepancy_probe_t2i(world.frozen, bench, world.vocab, "t2i_target", query="target"))
    return reps, avg_cosine_probe(dual, phi, bench, world.vocab)


__all__ = [
    "RunConfig", "World", "build_world", "train_phi", "make_triplets", "build_benchmark", "train_encoder",
    "run_ablation", "format_ablation", "ABLATION_ROWS", "read_config_file", "format_config", "probe_report",
    "format_report", "load_encoder", "save_phi", "load_phi", "write_manifest", "read_manifest",
]
