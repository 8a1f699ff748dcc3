import numpy as np
import pytest

from rtdlab.encoder import DualEncoder, VisualSurrogate
from rtdlab.projection import NoiseConfig
from rtdlab.text import tokenize
from rtdlab.training import (UPDATE_MASKS, NumericError, PairKind, PairMode, TrainConfig, TripletTable,
                             build_batch, mask_groups, train_naive, train_rtd)
from rtdlab.triplets import TextTriplet, apply_edit


@pytest.fixture
def triplets(small_grammar, templates):
    rng = np.random.default_rng(0)
    out = []
    for t in small_grammar.sample_tuples(40, rng):
        cap = small_grammar.caption(t)
        src = small_grammar.subjects[t[0]]
        tgt = small_grammar.subjects[(t[0] + 1) % small_grammar.n_subjects]
        tid = int(rng.choice(templates.replacement_ids))
        out.append(TextTriplet(cap, templates.render(tid, src, tgt), apply_edit(cap, src, tgt, False), src, tgt, tid))
    return out


def cfg(**kw):
    base = dict(lr=1e-2, batch_size=8, steps=5, noise=NoiseConfig(scale=0.1))
    return TrainConfig(**{**base, **kw})


def test_rb_batch_pairs_are_adjacent():
    b = build_batch(20, cfg(), np.random.default_rng(0))
    assert len(b) == 8
    for i in range(0, 8, 2):
        assert b.pairs[i].kind is PairKind.MODIFIED and b.pairs[i + 1].kind is PairKind.REFERENCE
        assert b.pairs[i].index == b.pairs[i + 1].index
    assert len({p.index for p in b.pairs}) == 4


def test_batch_modes():
    rng = np.random.default_rng(0)
    assert all(p.kind is PairKind.MODIFIED for p in build_batch(20, cfg(use_rb=False), rng).pairs)
    ref = build_batch(20, cfg(pair_mode="reference_only"), rng)
    assert all(p.kind is PairKind.REFERENCE for p in ref.pairs) and len(ref) == 8


def test_batch_needs_enough_triplets():
    with pytest.raises(ValueError, match="distinct triplets"):
        build_batch(3, cfg(), np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        cfg(batch_size=7)
    with pytest.raises(ValueError):
        cfg(tau=0.0)
    with pytest.raises(ValueError):
        cfg(update_mask="nope")
    assert cfg(batch_size=7, use_rb=False).batch_size == 7


def test_mask_groups_cover_affine_order(tiny_encoder):
    assert set(mask_groups("full", tiny_encoder)) == set(tiny_encoder.named())
    assert mask_groups("middle3", tiny_encoder) == ("W_v", "W_o", "W_1", "b_1")
    for name, groups in UPDATE_MASKS.items():
        if groups is not None:
            assert sum(g.startswith("W_") for g in groups) == 3


def test_training_anchors_frozen_and_phi(tiny_encoder, tiny_phi, triplets, vocab):
    dual = DualEncoder.from_frozen(tiny_encoder)
    f0, p0 = tiny_encoder.digest(), tiny_phi.named()["W_1"].data.tobytes()
    res = train_rtd(dual, tiny_phi, triplets, cfg(), vocab)
    assert len(res.history) == 5
    assert tiny_encoder.digest() == f0
    assert tiny_phi.named()["W_1"].data.tobytes() == p0
    assert dual.learnable.digest() != f0


def test_zero_steps_leaves_copy_identical(tiny_encoder, tiny_phi, triplets, vocab):
    dual = DualEncoder.from_frozen(tiny_encoder)
    res = train_rtd(dual, tiny_phi, triplets, cfg(steps=0), vocab)
    assert res.history == [] and dual.learnable.digest() == tiny_encoder.digest()


def test_partial_mask_only_moves_selected_groups(tiny_encoder, tiny_phi, triplets, vocab):
    dual = DualEncoder.from_frozen(tiny_encoder)
    train_rtd(dual, tiny_phi, triplets, cfg(update_mask="last3", weight_decay=0.0), vocab)
    moved = {k for k, t in dual.learnable.named().items()
             if not np.array_equal(t.data, tiny_encoder.named()[k].data)}
    assert moved == set(UPDATE_MASKS["last3"])


def test_training_deterministic(tiny_encoder, tiny_phi, triplets, vocab):
    runs = []
    for _ in range(2):
        dual = DualEncoder.from_frozen(tiny_encoder)
        res = train_rtd(dual, tiny_phi, triplets, cfg(), vocab)
        runs.append((res.history, dual.learnable.digest()))
    assert runs[0] == runs[1]


@pytest.mark.parametrize("kw", [dict(use_rc=False), dict(use_rc=False, use_rb=False),
                                dict(use_anchor=False, use_rc=False), dict(reference_rc="plain"),
                                dict(pair_mode=PairMode.REFERENCE_ONLY, use_rc=False)])
def test_ablation_variants_run(tiny_encoder, tiny_phi, triplets, vocab, kw):
    dual = DualEncoder.from_frozen(tiny_encoder)
    res = train_rtd(dual, tiny_phi, triplets, cfg(**kw), vocab)
    assert all(np.isfinite(res.history))
    assert tiny_encoder.digest() == dual.frozen.digest()


def test_nan_raises_numeric_error(tiny_encoder, tiny_phi, triplets, vocab):
    dual = DualEncoder.from_frozen(tiny_encoder)
    dual.learnable.W_out.data[:] = np.nan
    with pytest.raises(NumericError):
        train_rtd(dual, tiny_phi, triplets, cfg(), vocab)


def test_table_caches_frozen_embeddings(tiny_encoder, triplets, vocab):
    tab = TripletTable(triplets, tiny_encoder, vocab)
    assert tab.emb_t.shape == (len(triplets), 8)
    assert np.allclose(np.linalg.norm(tab.emb_r, axis=1), 1.0)
    with pytest.raises(ValueError):
        TripletTable([], tiny_encoder, vocab)


def test_naive_moves_encoder_not_phi(tiny_encoder, tiny_phi, small_grammar, vocab):
    caps = [tokenize(c, vocab) for c in small_grammar.sample_corpus(32, np.random.default_rng(0))]
    sur = VisualSurrogate.draw(8, 0.3, 0.01, np.random.default_rng(1))
    dual = DualEncoder.from_frozen(tiny_encoder)
    p0 = tiny_phi.named()["W_2"].data.copy()
    res = train_naive(dual, tiny_phi, caps, sur, vocab, cfg())
    assert len(res.history) == 5
    assert np.array_equal(tiny_phi.named()["W_2"].data, p0)
    assert dual.learnable.digest() != tiny_encoder.digest()
