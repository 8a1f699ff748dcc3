import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rtdlab import autodiff as ad
from rtdlab.autodiff import Tensor, check_gradients
from rtdlab.encoder import VisualSurrogate, encode_batch
from rtdlab.projection import (PSEUDO_SLOT, NoiseConfig, NoiseKind, PhiParams, PhiTrainConfig, compose_prompt,
                               inject_noise, pretrain_phi, project)
from rtdlab.text import PSEUDO, build_vocab, detokenize, tokenize


def test_prompt_layout(vocab):
    cond = tokenize("is red", vocab)
    seq, slots = compose_prompt("P", cond, vocab)
    assert detokenize(seq, vocab) == "a photo of <pseudo> that is red"
    assert seq.pseudo_slots == (PSEUDO_SLOT,) and slots == {PSEUDO_SLOT: "P"}


def test_prompt_without_condition(vocab):
    seq, _ = compose_prompt(None, tokenize("", vocab), vocab)
    assert detokenize(seq, vocab) == "a photo of <pseudo>"


def test_prompt_overflow_reports_lengths(vocab):
    cond = tokenize(" ".join(["red"] * 30), vocab, max_len=30)
    with pytest.raises(ValueError, match="exceeds max_len"):
        compose_prompt(None, cond, vocab, max_len=32)


def test_prompt_needs_prompt_words():
    with pytest.raises(ValueError):
        compose_prompt(None, None, build_vocab(["dog"]))


def test_noise_none_is_identity():
    x = np.arange(4.0)
    rng = np.random.default_rng(0)
    assert np.array_equal(inject_noise(x, NoiseConfig(NoiseKind.NONE), rng), x)
    assert np.array_equal(inject_noise(x, NoiseConfig(scale=0.0), rng), x)


def test_noise_rejects_nonfinite_and_negative_scale():
    with pytest.raises(ValueError):
        inject_noise(np.array([np.nan]), NoiseConfig(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        NoiseConfig(scale=-1.0)


@pytest.mark.parametrize("kind,var", [(NoiseKind.PRODUCT, 1 / 3), (NoiseKind.GAUSS, 1.0), (NoiseKind.UNIF, 1 / 3)])
def test_noise_variance(kind, var):
    # N(0,1)*U(0,1): E[N^2]E[U^2] = 1/3; U(-1,1): 1/3
    x = np.zeros(200_000)
    eta = inject_noise(x, NoiseConfig(kind, 0.5), np.random.default_rng(0))
    assert np.var(eta) == pytest.approx(var * 0.25, rel=0.02)


def test_noise_is_seed_deterministic():
    x = np.ones(5)
    a = inject_noise(x, NoiseConfig(), np.random.default_rng(3))
    b = inject_noise(x, NoiseConfig(), np.random.default_rng(3))
    assert np.array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_product_noise_bounded_by_gaussian_magnitude(seed):
    rng = np.random.default_rng(seed)
    x = np.zeros(16)
    eta = inject_noise(x, NoiseConfig(NoiseKind.PRODUCT, 1.0), rng)
    g = np.random.default_rng(seed).normal(size=16)
    assert np.all(np.abs(eta) <= np.abs(g) + 1e-12)


def test_project_shapes_and_gradients(tiny_phi):
    v = Tensor(np.random.default_rng(0).normal(size=(3, 8)), requires_grad=True)
    assert project(tiny_phi, np.zeros(8)).shape == (8,)
    assert project(tiny_phi, v).shape == (3, 8)
    tiny_phi.requires_grad_(True)
    w = np.random.default_rng(1).normal(size=(3, 8))
    rep = check_gradients(lambda: ad.sum_(ad.mul(project(tiny_phi, v), Tensor(w))),
                          [v] + list(tiny_phi.named().values()), eps=1e-5, tol=1e-5,
                          max_entries=40)
    assert rep.passed, rep


def test_pretrain_phi_only_moves_phi(tiny_encoder, small_grammar, vocab):
    caps = [tokenize(c, vocab) for c in small_grammar.sample_corpus(64, np.random.default_rng(0))]
    before = tiny_encoder.digest()
    sur = VisualSurrogate.draw(8, 0.3, 0.01, np.random.default_rng(1))
    res = pretrain_phi(tiny_encoder, caps, sur, vocab, PhiTrainConfig(steps=30, batch_size=16),
                       rng=np.random.default_rng(2))
    assert tiny_encoder.digest() == before
    assert len(res.curve) == 30
    assert np.mean(res.curve[-5:]) < np.mean(res.curve[:5])
