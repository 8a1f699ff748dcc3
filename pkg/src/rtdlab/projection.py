"""Pseudo-token projection, noise injection and the "a photo of [$] that ..." prompt."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import INIT_STD, EncoderParams, VisualSurrogate, encode_batch, synth_image_embed
from .losses import symmetric_info_nce
from .optim import AdamW
from .text import PSEUDO, TokenSeq, Vocabulary

PROMPT_HEAD = ("a", "photo", "of")
PROMPT_JOIN = "that"
PSEUDO_SLOT = 3


class NoiseKind(str, enum.Enum):
    PRODUCT = "product"
    GAUSS = "gauss"
    UNIF = "unif"
    NONE = "none"


@dataclass(frozen=True)
class NoiseConfig:
    kind: NoiseKind = NoiseKind.PRODUCT
    scale: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if self.scale < 0:
            raise ValueError(f"noise scale must be >= 0, got {self.scale}")

    @property
    def active(self) -> bool:
        return self.kind is not NoiseKind.NONE and self.scale > 0


def inject_noise(latent, cfg: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    """``latent + scale * eta``; the perturbation is a constant, not a parameter."""
    x = latent.data if isinstance(latent, Tensor) else np.asarray(latent, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("latent contains non-finite values")
    if not cfg.active:
        return x.copy()
    if cfg.kind is NoiseKind.PRODUCT:
        eta = rng.normal(size=x.shape) * rng.uniform(0.0, 1.0, size=x.shape)
    elif cfg.kind is NoiseKind.GAUSS:
        eta = rng.normal(size=x.shape)
    else:
        eta = rng.uniform(-1.0, 1.0, size=x.shape)
    return x + cfg.scale * eta


@dataclass
class PhiParams:
    """MLP ``latent -> pseudo word token``; tanh between layers."""

    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def init(cls, d: int, depth: int = 2, rng: np.random.Generator | None = None) -> "PhiParams":
        if depth < 1:
            raise ValueError("phi needs at least one layer")
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [d] + [4 * d] * (depth - 1) + [d]
        ws, bs = [], []
        for i in range(depth):
            ws.append(Tensor(rng.normal(0, INIT_STD, (dims[i], dims[i + 1])), name=f"W_{i + 1}"))
            bs.append(Tensor(rng.normal(0, INIT_STD, (dims[i + 1],)), name=f"b_{i + 1}"))
        return cls(ws, bs)

    def named(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            out[f"W_{i}"] = w
            out[f"b_{i}"] = b
        return out

    @classmethod
    def from_named(cls, named: dict[str, Tensor]) -> "PhiParams":
        depth = len(named) // 2
        return cls([named[f"W_{i}"] for i in range(1, depth + 1)],
                   [named[f"b_{i}"] for i in range(1, depth + 1)])

    def requires_grad_(self, flag: bool = True) -> "PhiParams":
        for t in self.named().values():
            t.requires_grad = flag
        return self

    @property
    def d(self) -> int:
        return self.weights[0].shape[0]


def project(phi: PhiParams, latent) -> Tensor:
    """Pseudo token(s) for a (d,) or (N, d) latent."""
    x = latent if isinstance(latent, Tensor) else Tensor(latent)
    single = x.data.ndim == 1
    if single:
        x = ad.reshape(x, (1, x.shape[0]))
    n = len(phi.weights)
    for i, (w, b) in enumerate(zip(phi.weights, phi.biases)):
        x = ad.affine(x, w, b)
        if i < n - 1:
            x = ad.tanh(x)
    return ad.reshape(x, (phi.d,)) if single else x


def compose_prompt(pseudo, cond: TokenSeq | None, vocab: Vocabulary,
                   max_len: int = 32) -> tuple[TokenSeq, dict[int, Tensor]]:
    """``a photo of <PSEUDO> that <cond>``, or ``a photo of <PSEUDO>`` without a condition."""
    for w in PROMPT_HEAD + (PROMPT_JOIN,):
        if w not in vocab:
            raise ValueError(f"prompt word {w!r} missing from vocabulary")
    ids = tuple(vocab.id(w) for w in PROMPT_HEAD) + (PSEUDO,)
    if cond is not None and len(cond) > 0:
        ids = ids + (vocab.id(PROMPT_JOIN),) + tuple(cond.ids)
    if len(ids) > max_len:
        n = 0 if cond is None else len(cond)
        raise ValueError(f"prompt length {len(ids)} (condition {n} tokens) exceeds max_len {max_len}")
    return TokenSeq(ids), {PSEUDO_SLOT: pseudo}


def prompt_seqs(conds: Sequence[TokenSeq | None], vocab: Vocabulary, max_len: int = 32) -> list[TokenSeq]:
    return [compose_prompt(None, c, vocab, max_len)[0] for c in conds]


def encode_prompts(params: EncoderParams, phi: PhiParams, latents, conds: Sequence[TokenSeq | None],
                   vocab: Vocabulary) -> Tensor:
    """Encode ``a photo of [phi(latent)] that cond`` for a batch."""
    seqs = prompt_seqs(conds, vocab, params.max_len)
    return encode_batch(params, seqs, project(phi, latents))


@dataclass
class PhiTrainConfig:
    steps: int = 400
    batch_size: int = 64
    lr: float = 3e-3
    tau: float = 0.07
    depth: int = 2


@dataclass
class PhiTrainResult:
    phi: PhiParams
    curve: list[float] = field(default_factory=list)


def pretrain_phi(frozen: EncoderParams, captions: Sequence[TokenSeq], surrogate: VisualSurrogate,
                 vocab: Vocabulary, cfg: PhiTrainConfig | None = None,
                 rng: np.random.Generator | None = None,
                 phi: PhiParams | None = None) -> PhiTrainResult:
    """Contrast each image embedding with the frozen encoding of ``a photo of [phi(image)]``.

    Only ``phi`` is optimised; the frozen encoder is read-only.
    """
    cfg = cfg or PhiTrainConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    if len(captions) < 2 or cfg.batch_size < 2:
        raise ValueError("phi pretraining needs a batch of at least 2 captions")
    phi = phi or PhiParams.init(frozen.d, cfg.depth, rng)
    images = synth_image_embed(frozen, list(captions), surrogate, rng)
    phi.requires_grad_(True)
    opt = AdamW(phi.named(), lr=cfg.lr, weight_decay=0.0)
    b = min(cfg.batch_size, len(captions))
    prompt = prompt_seqs([None] * b, vocab, frozen.max_len)
    curve = []
    for _ in range(cfg.steps):
        idx = rng.choice(len(captions), size=b, replace=False)
        v = Tensor(images[idx])
        opt.zero_grad()
        with ad.Tape() as tape:
            emb = encode_batch(frozen, prompt, project(phi, v))
            loss = symmetric_info_nce(v, emb, cfg.tau)
        tape.backward(loss)
        opt.step()
        curve.append(float(loss.data))
    phi.requires_grad_(False)
    for t in phi.named().values():
        t.grad = None
    return PhiTrainResult(phi, curve)
