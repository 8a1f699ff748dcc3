"""Text-only fine-tuning of the learnable encoder on text triplets."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import DualEncoder, EncoderParams, VisualSurrogate, encode_batch, encode_texts, synth_image_embed
from .losses import symmetric_info_nce, tcl_loss
from .optim import AdamW
from .projection import (NoiseConfig, PhiParams, compose_prompt, inject_noise, project,
                         prompt_seqs)
from .rng import rng_stream
from .text import TokenSeq, Vocabulary, tokenize
from .triplets import TextTriplet

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    pass


class PairKind(str, enum.Enum):
    MODIFIED = "modified"
    REFERENCE = "reference"


class PairMode(str, enum.Enum):
    TRIPLET = "triplet"
    REFERENCE_ONLY = "reference_only"


# affine groups in forward order; biases travel with their weight
AFFINE_ORDER = ("W_q", "W_k", "W_v", "W_o", "W_1", "W_2", "W_out")
_BIAS_OF = {"W_1": "b_1", "W_2": "b_2", "W_out": "b_out"}


def _with_bias(names) -> tuple[str, ...]:
    out = []
    for n in names:
        out.append(n)
        if n in _BIAS_OF:
            out.append(_BIAS_OF[n])
    return tuple(out)


UPDATE_MASKS = {
    "full": None,
    "fc_only": _with_bias(("W_1", "W_2", "W_out")),
    "front3": _with_bias(AFFINE_ORDER[:3]),
    "middle3": _with_bias(AFFINE_ORDER[2:5]),
    "last3": _with_bias(AFFINE_ORDER[4:]),
    "interleave3": _with_bias((AFFINE_ORDER[0], AFFINE_ORDER[3], AFFINE_ORDER[6])),
}


def mask_groups(mask: str, params: EncoderParams) -> tuple[str, ...]:
    if mask not in UPDATE_MASKS:
        raise ValueError(f"unknown update mask {mask!r}; choose from {sorted(UPDATE_MASKS)}")
    groups = UPDATE_MASKS[mask]
    return tuple(params.named()) if groups is None else groups


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.07
    lr: float = 1e-5
    weight_decay: float = 0.01
    batch_size: int = 512
    steps: int = 2000
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    use_rb: bool = True
    use_rc: bool = True
    use_anchor: bool = True
    pair_mode: PairMode = PairMode.TRIPLET
    update_mask: str = "full"
    reference_rc: str = "prompt"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pair_mode", PairMode(self.pair_mode))
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.rb_active and self.batch_size % 2:
            raise ValueError("refined batch sampling needs an even batch size")
        if self.reference_rc not in ("prompt", "plain"):
            raise ValueError("reference_rc must be 'prompt' or 'plain'")
        if self.update_mask not in UPDATE_MASKS:
            raise ValueError(f"unknown update mask {self.update_mask!r}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    @property
    def rb_active(self) -> bool:
        return self.use_rb and self.pair_mode is PairMode.TRIPLET


DESK_TRAIN = dict(batch_size=192, lr=3e-3, steps=2000, noise=NoiseConfig("product", 0.1))


def desk_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**DESK_TRAIN, **overrides})


# ---------------------------------------------------------------- data

@dataclass(frozen=True)
class RtdPair:
    kind: PairKind
    index: int


@dataclass(frozen=True)
class RtdBatch:
    pairs: tuple[RtdPair, ...]

    def __len__(self) -> int:
        return len(self.pairs)


class TripletTable:
    """Tokenised triplets plus frozen-encoder embeddings of every caption."""

    def __init__(self, triplets: Sequence[TextTriplet], frozen: EncoderParams, vocab: Vocabulary):
        if not triplets:
            raise ValueError("no triplets to train on")
        L = frozen.max_len
        self.triplets = list(triplets)
        self.vocab = vocab
        self.t_r = [tokenize(t.t_r, vocab, L) for t in triplets]
        self.t_c = [tokenize(t.t_c, vocab, L) for t in triplets]
        self.t_t = [tokenize(t.t_t, vocab, L) for t in triplets]
        self.concat = [tokenize(t.t_r + " " + t.t_c, vocab, L) for t in triplets]
        self.emb_r = encode_texts(frozen, self.t_r)
        self.emb_t = encode_texts(frozen, self.t_t)

    def __len__(self) -> int:
        return len(self.triplets)


def build_batch(n_triplets: int, cfg: TrainConfig, rng: np.random.Generator) -> RtdBatch:
    B = cfg.batch_size
    if cfg.rb_active:
        if B % 2:
            raise ValueError("refined batch sampling needs an even batch size")
        need = B // 2
    else:
        need = B
    if n_triplets < need:
        raise ValueError(f"batch needs {need} distinct triplets, only {n_triplets} available")
    idx = rng.choice(n_triplets, size=need, replace=False)
    if cfg.pair_mode is PairMode.REFERENCE_ONLY:
        pairs = [RtdPair(PairKind.REFERENCE, int(i)) for i in idx]
    elif cfg.rb_active:
        pairs = [RtdPair(k, int(i)) for i in idx for k in (PairKind.MODIFIED, PairKind.REFERENCE)]
    else:
        pairs = [RtdPair(PairKind.MODIFIED, int(i)) for i in idx]
    return RtdBatch(tuple(pairs))


# ---------------------------------------------------------------- forward

def forward_queries(dual: DualEncoder, phi: PhiParams, table: TripletTable, batch: RtdBatch,
                    cfg: TrainConfig, rng: np.random.Generator) -> Tensor:
    """Learnable-encoder embeddings of the query side of each pair, (B, d)."""
    seqs: list[TokenSeq] = []
    if not cfg.use_rc:
        for p in batch.pairs:
            seqs.append(table.concat[p.index] if p.kind is PairKind.MODIFIED else table.t_r[p.index])
        return encode_batch(dual.learnable, seqs)
    idx = [p.index for p in batch.pairs]
    latent = inject_noise(table.emb_r[idx], cfg.noise, rng)
    pseudo = Tensor(project(phi, latent).data)
    L = dual.learnable.max_len
    for p in batch.pairs:
        if p.kind is PairKind.MODIFIED:
            seqs.append(compose_prompt(None, table.t_c[p.index], table.vocab, L)[0])
        elif cfg.reference_rc == "prompt":
            seqs.append(compose_prompt(None, None, table.vocab, L)[0])
        else:
            seqs.append(table.t_r[p.index])
    return encode_batch(dual.learnable, seqs, pseudo)


def forward_targets(dual: DualEncoder, table: TripletTable, batch: RtdBatch,
                    cfg: TrainConfig) -> Tensor:
    if cfg.use_anchor:
        rows = [table.emb_t[p.index] if p.kind is PairKind.MODIFIED else table.emb_r[p.index]
                for p in batch.pairs]
        return Tensor(np.stack(rows))
    seqs = [table.t_t[p.index] if p.kind is PairKind.MODIFIED else table.t_r[p.index]
            for p in batch.pairs]
    return encode_batch(dual.learnable, seqs)


def make_optimizer(dual: DualEncoder, cfg: TrainConfig) -> AdamW:
    groups = mask_groups(cfg.update_mask, dual.learnable)
    dual.learnable.requires_grad_(True, only=groups)
    named = dual.learnable.named()
    return AdamW({k: named[k] for k in groups}, lr=cfg.lr, weight_decay=cfg.weight_decay)


def train_step(dual: DualEncoder, phi: PhiParams, table: TripletTable, batch: RtdBatch,
               opt: AdamW, cfg: TrainConfig, rng: np.random.Generator) -> float:
    for t in dual.learnable.named().values():
        t.grad = None
    with ad.Tape() as tape:
        q = forward_queries(dual, phi, table, batch, cfg, rng)
        t = forward_targets(dual, table, batch, cfg)
        loss = tcl_loss(q, t, cfg.tau, anchor=cfg.use_anchor)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value} at optimizer step {opt.t + 1}")
    tape.backward(loss)
    opt.step()
    return value


@dataclass
class TrainResult:
    history: list[float]
    learnable: EncoderParams


def train_rtd(dual: DualEncoder, phi: PhiParams, triplets: Sequence[TextTriplet] | TripletTable,
              cfg: TrainConfig, vocab: Vocabulary | None = None) -> TrainResult:
    """Run ``cfg.steps`` steps; the final step's weights are the selected model."""
    table = triplets if isinstance(triplets, TripletTable) else TripletTable(triplets, dual.frozen, vocab)
    batch_rng = rng_stream(cfg.seed, "rtd:batch")
    noise_rng = rng_stream(cfg.seed, "rtd:noise")
    opt = make_optimizer(dual, cfg)
    history = []
    for step in range(cfg.steps):
        batch = build_batch(len(table), cfg, batch_rng)
        history.append(train_step(dual, phi, table, batch, opt, cfg, noise_rng))
        if step % 500 == 0:
            log.debug("rtd step %d loss %.4f", step, history[-1])
    dual.learnable.requires_grad_(False)
    for t in dual.learnable.named().values():
        t.grad = None
    return TrainResult(history, dual.learnable)


def train_naive(dual: DualEncoder, phi: PhiParams, captions: Sequence[TokenSeq],
                surrogate: VisualSurrogate, vocab: Vocabulary, cfg: TrainConfig) -> TrainResult:
    """Keep optimising the projection objective, but move the text encoder instead of phi."""
    rng = rng_stream(cfg.seed, "naive")
    images = synth_image_embed(dual.frozen, list(captions), surrogate, rng)
    opt = make_optimizer(dual, cfg)
    b = min(cfg.batch_size, len(captions))
    prompt = prompt_seqs([None] * b, vocab, dual.learnable.max_len)
    history = []
    for _ in range(cfg.steps):
        idx = rng.choice(len(captions), size=b, replace=False)
        v = Tensor(images[idx])
        for t in dual.learnable.named().values():
            t.grad = None
        with ad.Tape() as tape:
            pseudo = Tensor(project(phi, v).data)
            loss = symmetric_info_nce(v, encode_batch(dual.learnable, prompt, pseudo), cfg.tau)
        if not np.isfinite(loss.data):
            raise NumericError("non-finite loss in naive update")
        tape.backward(loss)
        opt.step()
        history.append(float(loss.data))
    dual.learnable.requires_grad_(False)
    return TrainResult(history, dual.learnable)
