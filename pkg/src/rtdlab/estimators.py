"""scikit-learn style wrappers over the functional core.

``ProjectionPretrainer`` learns phi from captions; ``RTDTextEncoder`` fine-tunes
a copy of the frozen encoder on text triplets and then embeds texts or
composed queries. Both follow the fit/transform convention and expose
``get_params`` / ``set_params`` through :class:`sklearn.base.BaseEstimator`.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .encoder import DualEncoder, EncoderParams, VisualSurrogate, encode_texts
from .projection import NoiseConfig, PhiParams, PhiTrainConfig, encode_prompts, pretrain_phi, project
from .rng import rng_stream
from .text import Vocabulary, tokenize
from .training import TrainConfig, train_rtd
from .triplets import TextTriplet


def _check_texts(X) -> list[str]:
    texts = list(X)
    if not texts:
        raise ValueError("expected at least one text")
    if not all(isinstance(t, str) for t in texts):
        raise TypeError("expected a sequence of strings")
    return texts


class ProjectionPretrainer(TransformerMixin, BaseEstimator):
    """Fit phi on captions; ``transform`` maps image embeddings to pseudo tokens."""

    def __init__(self, encoder: EncoderParams, vocab: Vocabulary, surrogate: VisualSurrogate,
                 steps: int = 400, batch_size: int = 64, lr: float = 3e-3, tau: float = 0.07,
                 depth: int = 2, seed: int = 0):
        self.encoder = encoder
        self.vocab = vocab
        self.surrogate = surrogate
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.tau = tau
        self.depth = depth
        self.seed = seed

    def fit(self, X, y=None):
        caps = [tokenize(t, self.vocab, self.encoder.max_len) for t in _check_texts(X)]
        cfg = PhiTrainConfig(self.steps, self.batch_size, self.lr, self.tau, self.depth)
        res = pretrain_phi(self.encoder, caps, self.surrogate, self.vocab, cfg, rng=rng_stream(self.seed, "phi"))
        self.phi_ = res.phi
        self.loss_curve_ = res.curve
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "phi_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.phi_.d:
            raise ValueError(f"expected {self.phi_.d} features, got {X.shape[1]}")
        return project(self.phi_, X).data


class RTDTextEncoder(TransformerMixin, BaseEstimator):
    """Fine-tune a learnable copy of ``encoder`` on triplets; embed texts with it.

    ``fit`` takes a sequence of :class:`TextTriplet`. After fitting,
    ``transform`` embeds plain texts and :meth:`compose` embeds
    ``a photo of [phi(image)] that <condition>`` queries.
    """

    def __init__(self, encoder: EncoderParams, phi: PhiParams, vocab: Vocabulary, tau: float = 0.07,
                 lr: float = 3e-3, weight_decay: float = 0.01, batch_size: int = 192, steps: int = 2000,
                 noise_kind: str = "product", noise_scale: float = 0.1, use_rb: bool = True,
                 use_rc: bool = True, use_anchor: bool = True, pair_mode: str = "triplet",
                 update_mask: str = "full", reference_rc: str = "prompt", seed: int = 0):
        self.encoder = encoder
        self.phi = phi
        self.vocab = vocab
        self.tau = tau
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.steps = steps
        self.noise_kind = noise_kind
        self.noise_scale = noise_scale
        self.use_rb = use_rb
        self.use_rc = use_rc
        self.use_anchor = use_anchor
        self.pair_mode = pair_mode
        self.update_mask = update_mask
        self.reference_rc = reference_rc
        self.seed = seed

    def train_config(self) -> TrainConfig:
        return TrainConfig(tau=self.tau, lr=self.lr, weight_decay=self.weight_decay,
                           batch_size=self.batch_size, steps=self.steps,
                           noise=NoiseConfig(self.noise_kind, self.noise_scale), use_rb=self.use_rb,
                           use_rc=self.use_rc, use_anchor=self.use_anchor, pair_mode=self.pair_mode,
                           update_mask=self.update_mask, reference_rc=self.reference_rc, seed=self.seed)

    def fit(self, X: Sequence[TextTriplet], y=None):
        triplets = list(X)
        if not triplets or not all(isinstance(t, TextTriplet) for t in triplets):
            raise TypeError("fit expects a non-empty sequence of TextTriplet")
        dual = DualEncoder.from_frozen(self.encoder)
        res = train_rtd(dual, self.phi, triplets, self.train_config(), self.vocab)
        self.dual_ = dual
        self.loss_history_ = res.history
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "dual_")
        seqs = [tokenize(t, self.vocab, self.encoder.max_len) for t in _check_texts(X)]
        return encode_texts(self.dual_.learnable, seqs)

    def compose(self, images, conditions: Sequence[str]) -> np.ndarray:
        check_is_fitted(self, "dual_")
        images = check_array(images, dtype=np.float64)
        conds = [tokenize(c, self.vocab, self.encoder.max_len) for c in conditions]
        if len(conds) != len(images):
            raise ValueError("need one condition per image")
        return encode_prompts(self.dual_.learnable, self.phi, images, conds, self.vocab).data
