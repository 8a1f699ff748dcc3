"""Toy transformer text encoder, frozen/learnable twin, and the visual surrogate."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import symmetric_info_nce
from .optim import AdamW
from .text import DEFAULT_MAX_LEN, PSEUDO, TokenSeq, pad_batch

INIT_STD = 0.02


@dataclass
class EncoderParams:
    E_w: Tensor
    P: Tensor
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor
    W_1: Tensor
    b_1: Tensor
    W_2: Tensor
    b_2: Tensor
    W_out: Tensor
    b_out: Tensor

    @classmethod
    def init(cls, vocab_size: int, d: int = 64, max_len: int = DEFAULT_MAX_LEN,
             rng: np.random.Generator | None = None) -> "EncoderParams":
        rng = rng if rng is not None else np.random.default_rng(0)
        shapes = {
            "E_w": (vocab_size, d), "P": (max_len, d),
            "W_q": (d, d), "W_k": (d, d), "W_v": (d, d), "W_o": (d, d),
            "W_1": (d, 4 * d), "b_1": (4 * d,), "W_2": (4 * d, d), "b_2": (d,),
            "W_out": (d, d), "b_out": (d,),
        }
        return cls(**{k: Tensor(rng.normal(0.0, INIT_STD, s), name=k) for k, s in shapes.items()})

    @property
    def d(self) -> int:
        return self.E_w.shape[1]

    @property
    def max_len(self) -> int:
        return self.P.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.E_w.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "EncoderParams":
        out = copy.deepcopy(self)
        for t in out.named().values():
            t.grad = None
            t.requires_grad = False
        return out

    def requires_grad_(self, flag: bool = True, only: Sequence[str] | None = None) -> "EncoderParams":
        for k, t in self.named().items():
            t.requires_grad = flag and (only is None or k in only)
        return self

    def digest(self) -> str:
        return params_digest(self.named())


def params_digest(named: Mapping[str, Tensor]) -> str:
    h = hashlib.sha256()
    for k, t in named.items():
        h.update(k.encode())
        h.update(ad.dump_tensor(t))
    return h.hexdigest()


def save_params(named: Mapping[str, Tensor], path) -> None:
    """Manifest line (``name@offset`` pairs) followed by concatenated tensor dumps."""
    blobs, offsets, pos = [], [], 0
    for k, t in named.items():
        b = ad.dump_tensor(t)
        offsets.append(f"{k}@{pos}")
        blobs.append(b)
        pos += len(b)
    header = ("RTDCKPT " + " ".join(offsets) + "\n").encode("utf-8")
    Path(path).write_bytes(header + b"".join(blobs))


def load_params(path) -> dict[str, Tensor]:
    buf = Path(path).read_bytes()
    nl = buf.index(b"\n")
    head = buf[:nl].decode("utf-8").split()
    if not head or head[0] != "RTDCKPT":
        raise ValueError(f"{path}: not a checkpoint")
    body = buf[nl + 1:]
    out = {}
    for item in head[1:]:
        name, off = item.rsplit("@", 1)
        t, _ = ad.load_tensor(body, int(off))
        t.name = name
        out[name] = t
    return out


def load_encoder(path) -> EncoderParams:
    return EncoderParams(**load_params(path))


# ---------------------------------------------------------------- forward

def _pseudo_positions(seqs: Sequence[TokenSeq]) -> np.ndarray:
    pos = np.full(len(seqs), -1, dtype=np.int64)
    for i, s in enumerate(seqs):
        slots = s.pseudo_slots
        if len(slots) > 1:
            raise ValueError(f"sequence {i} has {len(slots)} pseudo slots; at most one is supported")
        if slots:
            pos[i] = slots[0]
    return pos


def embed_batch(params: EncoderParams, seqs: Sequence[TokenSeq],
                pseudo: Tensor | None = None) -> tuple[Tensor, np.ndarray]:
    ids, mask = pad_batch(seqs)
    if ids.shape[1] > params.max_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len {params.max_len}")
    ppos = _pseudo_positions(seqs)
    if np.any(ppos >= 0):
        if pseudo is None:
            raise ValueError("pseudo slot present but no pseudo vectors supplied")
        if pseudo.shape != (len(seqs), params.d):
            raise ValueError(f"pseudo vectors must be ({len(seqs)}, {params.d}), got {pseudo.shape}")
        return ad.embed(params.E_w, params.P, ids, pseudo, ppos), mask
    return ad.embed(params.E_w, params.P, ids), mask


def embed_tokens(params: EncoderParams, seq: TokenSeq,
                 pseudo_vectors: Mapping[int, Tensor] | None = None) -> Tensor:
    """Rows ``E_w[id] + P[i]``, with pseudo slots taking the supplied vectors."""
    pseudo_vectors = dict(pseudo_vectors or {})
    slots = seq.pseudo_slots
    missing = [s for s in slots if s not in pseudo_vectors]
    if missing:
        raise ValueError(f"no pseudo vector supplied for slot(s) {missing}")
    pseudo = None
    if slots:
        pseudo = ad.reshape(pseudo_vectors[slots[0]], (1, params.d))
    rows, _ = embed_batch(params, [seq], pseudo)
    return ad.reshape(rows, (len(seq), params.d))


def encode_rows(params: EncoderParams, X: Tensor, mask: np.ndarray) -> Tensor:
    """One attention block, one tanh feed-forward block, mean pool, head, L2 norm.

    ``X`` is (N, L, d) and ``mask`` (N, L) marks real tokens; returns (N, d).
    """
    d = params.d
    key_bias = np.where(mask, 0.0, ad.NEG_INF_BIAS)[:, None, :]
    q = ad.matmul(X, params.W_q)
    k = ad.matmul(X, params.W_k)
    v = ad.matmul(X, params.W_v)
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d))
    attn = ad.softmax(scores, key_bias)
    X = ad.add(X, ad.matmul(ad.matmul(attn, v), params.W_o))
    h = ad.tanh(ad.affine(X, params.W_1, params.b_1))
    X = ad.add(X, ad.affine(h, params.W_2, params.b_2))
    pooled = ad.masked_mean(X, mask)
    return ad.l2_normalize(ad.affine(pooled, params.W_out, params.b_out))


def encode(params: EncoderParams, rows: Tensor) -> Tensor:
    if rows.data.ndim != 2 or rows.shape[0] == 0:
        raise ValueError(f"encode needs a non-empty (len, d) input, got {rows.shape}")
    if rows.shape[0] > params.max_len:
        raise ValueError(f"length {rows.shape[0]} exceeds max_len {params.max_len}")
    L = rows.shape[0]
    out = encode_rows(params, ad.reshape(rows, (1, L, params.d)), np.ones((1, L), bool))
    return ad.reshape(out, (params.d,))


def _length_split(lengths: np.ndarray) -> int:
    """Cut point in ascending ``lengths`` minimising padded tokens over two groups (0 = no cut)."""
    n = len(lengths)
    cost = np.arange(1, n) * lengths[:-1] + (n - np.arange(1, n)) * lengths[-1]
    if not len(cost):
        return 0
    k = int(np.argmin(cost))
    return k + 1 if cost[k] < 0.8 * n * lengths[-1] else 0


def encode_batch(params: EncoderParams, seqs: Sequence[TokenSeq],
                 pseudo: Tensor | None = None) -> Tensor:
    """Encode a batch, padding short and long sequences separately when that saves work.

    Rows never interact, so bucketing changes cost, not results.
    """
    lengths = np.array([len(s) for s in seqs])
    order = np.argsort(lengths, kind="stable")
    cut = _length_split(lengths[order]) if len(seqs) > 1 else 0
    if cut == 0:
        X, mask = embed_batch(params, seqs, pseudo)
        return encode_rows(params, X, mask)
    parts = []
    for idx in (order[:cut], order[cut:]):
        sub = [seqs[i] for i in idx]
        p = None if pseudo is None else ad.take_rows(pseudo, idx)
        X, mask = embed_batch(params, sub, p)
        parts.append(encode_rows(params, X, mask))
    return ad.take_rows(ad.concat(parts, axis=0), np.argsort(order, kind="stable"))


def encode_texts(params: EncoderParams, seqs: Sequence[TokenSeq], chunk: int = 256) -> np.ndarray:
    """Gradient-free batch encoding to a plain (N, d) array."""
    out = [encode_batch(params, seqs[i:i + chunk]).data for i in range(0, len(seqs), chunk)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.d))


# ---------------------------------------------------------------- twin + surrogate

@dataclass
class DualEncoder:
    frozen: EncoderParams
    learnable: EncoderParams

    @classmethod
    def from_frozen(cls, frozen: EncoderParams) -> "DualEncoder":
        return cls(frozen=frozen, learnable=frozen.copy())


@dataclass
class VisualSurrogate:
    gap: np.ndarray
    sigma_img: float

    def __post_init__(self):
        if self.sigma_img < 0:
            raise ValueError("sigma_img must be non-negative")
        self.gap = np.asarray(self.gap, dtype=np.float64)

    @classmethod
    def draw(cls, d: int, gap_norm: float, sigma_img: float,
             rng: np.random.Generator) -> "VisualSurrogate":
        g = rng.normal(size=d)
        return cls(gap=gap_norm * g / np.linalg.norm(g), sigma_img=sigma_img)

    @property
    def gap_norm(self) -> float:
        return float(np.linalg.norm(self.gap))


def synth_image_embed(frozen: EncoderParams, caption: TokenSeq | Sequence[TokenSeq],
                      surrogate: VisualSurrogate, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm stand-in for an image embedding of ``caption``.

    Accepts one caption (returns (d,)) or a list (returns (N, d)).
    """
    single = isinstance(caption, TokenSeq)
    seqs = [caption] if single else list(caption)
    if any(len(s) == 0 for s in seqs):
        raise ValueError("cannot synthesize an image for an empty caption")
    t = encode_texts(frozen, seqs)
    noise = rng.normal(0.0, 1.0, size=t.shape) * surrogate.sigma_img
    v = t + surrogate.gap + noise
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v[0] if single else v


# ---------------------------------------------------------------- self-alignment

def _dropout_view(seq: TokenSeq, p: float, rng: np.random.Generator) -> TokenSeq:
    keep = [t for t in seq.ids if rng.random() >= p]
    if not keep:
        keep = [seq.ids[rng.integers(len(seq.ids))]]
    return TokenSeq(tuple(keep))


def self_align(params: EncoderParams, captions: Sequence[TokenSeq], steps: int = 300,
               batch_size: int = 64, lr: float = 3e-3, tau: float = 0.07,
               drop: float = 0.25, rng: np.random.Generator | None = None) -> list[float]:
    """Stand-in for pretraining: pull two token-dropout views of a caption together.

    Trains ``params`` in place and returns the loss curve.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if len(captions) < 2:
        raise ValueError("self-alignment needs at least 2 captions")
    params.requires_grad_(True)
    opt = AdamW(params.named(), lr=lr, weight_decay=0.0)
    curve = []
    b = min(batch_size, len(captions))
    for _ in range(steps):
        idx = rng.choice(len(captions), size=b, replace=False)
        va = [_dropout_view(captions[i], drop, rng) for i in idx]
        vb = [_dropout_view(captions[i], drop, rng) for i in idx]
        opt.zero_grad()
        with ad.Tape() as tape:
            loss = symmetric_info_nce(encode_batch(params, va), encode_batch(params, vb), tau)
        tape.backward(loss)
        opt.step()
        curve.append(float(loss.data))
    params.requires_grad_(False)
    for t in params.named().values():
        t.grad = None
    return curve
