"""Contrastive objectives built from tape primitives."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _as_matrix(x: Tensor | Sequence[Tensor]) -> Tensor:
    if isinstance(x, Tensor):
        if x.data.ndim != 2:
            raise ValueError(f"expected a (B, d) matrix, got {x.shape}")
        return x
    return ad.stack(list(x))


def _tcl(q: Tensor, t: Tensor, tau: float, anchor: bool) -> Tensor:
    B = q.data.shape[0]
    q = ad.l2_normalize(q)
    t = ad.l2_normalize(ad.stop_gradient(t) if anchor else t)
    inv = 1.0 / tau
    s_qt = ad.mul(ad.matmul(q, ad.transpose(t)), inv)
    s_tt = ad.mul(ad.matmul(t, ad.transpose(t)), inv)
    s_qq = ad.mul(ad.matmul(q, ad.transpose(q)), inv)
    pos = ad.diagonal(s_qt)
    keep = np.concatenate([np.ones((B, B), bool), ~np.eye(B, dtype=bool)], axis=1)
    den_q = ad.logsumexp(ad.concat([s_qt, s_tt], axis=1), mask=keep)
    den_t = ad.logsumexp(ad.concat([ad.transpose(s_qt), s_qq], axis=1), mask=keep)
    per_k = ad.sub(ad.add(den_q, den_t), ad.mul(pos, 2.0))
    return ad.mean(per_k)


def tcl_loss(queries, targets, tau: float = 0.07, anchor: bool = True) -> Tensor:
    """Target-anchored symmetric InfoNCE.

    For each pair k the first term normalises over all targets plus the
    other targets' mutual similarities; the second swaps the roles of
    queries and targets. With ``anchor`` the targets are treated as
    constants (they come from the frozen encoder).
    """
    q, t = _as_matrix(queries), _as_matrix(targets)
    if q.shape != t.shape:
        raise ValueError(f"queries {q.shape} and targets {t.shape} disagree")
    if q.shape[0] < 2:
        raise ValueError("tcl_loss needs a batch of at least 2 pairs")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return _tcl(q, t, tau, anchor)


def symmetric_info_nce(a: Tensor, b: Tensor, tau: float = 0.07) -> Tensor:
    """CLIP-style loss: mean of row-wise and column-wise cross-entropy on a @ b.T."""
    B = a.data.shape[0]
    if B < 2:
        raise ValueError("contrastive loss needs at least 2 items")
    logits = ad.mul(ad.matmul(ad.l2_normalize(a), ad.transpose(ad.l2_normalize(b))), 1.0 / tau)
    pos = ad.diagonal(logits)
    rows = ad.logsumexp(logits)
    cols = ad.logsumexp(ad.transpose(logits))
    per = ad.sub(ad.mul(ad.add(rows, cols), 0.5), pos)
    return ad.mean(per)
