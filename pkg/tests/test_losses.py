import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rtdlab import autodiff as ad
from rtdlab.autodiff import Tape, Tensor, check_gradients
from rtdlab.losses import _tcl, symmetric_info_nce, tcl_loss

from oracles import tcl_bruteforce


def pairs(B, d, seed):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(B, d)), rng.normal(size=(B, d))


@pytest.mark.parametrize("B,d", [(2, 4), (4, 64), (8, 4)])
def test_matches_bruteforce(B, d):
    q, t = pairs(B, d, B * d)
    got = tcl_loss(Tensor(q), Tensor(t), 0.07).item()
    assert got == pytest.approx(tcl_bruteforce(q, t, 0.07), rel=1e-9)


def test_single_pair_batch_is_zero():
    # with B=1 both denominators collapse to the positive itself
    v = np.array([[1.0, 0.0]])
    assert _tcl(Tensor(v), Tensor(v), 0.07, True).item() == pytest.approx(0.0, abs=1e-12)


def test_public_api_rejects_single_pair():
    with pytest.raises(ValueError):
        tcl_loss(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))))


def test_rejects_bad_tau_and_shape():
    q, t = pairs(2, 3, 0)
    with pytest.raises(ValueError):
        tcl_loss(Tensor(q), Tensor(t), tau=0.0)
    with pytest.raises(ValueError):
        tcl_loss(Tensor(q), Tensor(t[:, :2]))


def test_accepts_list_of_vectors():
    q, t = pairs(3, 4, 1)
    a = tcl_loss([Tensor(r) for r in q], [Tensor(r) for r in t]).item()
    assert a == pytest.approx(tcl_loss(Tensor(q), Tensor(t)).item(), rel=1e-12)


def test_no_overflow_at_small_tau():
    q, t = pairs(4, 8, 2)
    val = tcl_loss(Tensor(q), Tensor(t), tau=1e-3).item()
    assert np.isfinite(val)


def test_anchored_targets_get_exact_zero_grad():
    q, t = pairs(4, 6, 3)
    qt, tt = Tensor(q, requires_grad=True), Tensor(t, requires_grad=True)
    with Tape() as tape:
        loss = tcl_loss(qt, tt, anchor=True)
    tape.backward(loss)
    assert np.all(tt.grad == 0.0)
    assert np.any(qt.grad != 0.0)


def test_unanchored_targets_receive_grad():
    q, t = pairs(4, 6, 3)
    qt, tt = Tensor(q, requires_grad=True), Tensor(t, requires_grad=True)
    with Tape() as tape:
        loss = tcl_loss(qt, tt, anchor=False)
    tape.backward(loss)
    assert np.any(tt.grad != 0.0)


@pytest.mark.parametrize("anchor", [True, False])
def test_gradient_matches_finite_differences(anchor):
    q, t = pairs(4, 5, 9)
    qt, tt = Tensor(q, requires_grad=True), Tensor(t, requires_grad=True)
    # anchored targets are constants by contract, so only queries are compared there
    params = [qt] if anchor else [qt, tt]
    rep = check_gradients(lambda: tcl_loss(qt, tt, anchor=anchor), params, eps=1e-4, tol=1e-4)
    assert rep.passed, rep


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(2, 16), st.integers(0, 2**31))
def test_permutation_invariance(B, d, seed):
    q, t = pairs(B, d, seed)
    perm = np.random.default_rng(seed + 1).permutation(B)
    a = tcl_loss(Tensor(q), Tensor(t)).item()
    b = tcl_loss(Tensor(q[perm]), Tensor(t[perm])).item()
    assert a == pytest.approx(b, rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(2, 8), st.integers(0, 2**31), st.floats(0.01, 100.0))
def test_scale_invariance(B, d, seed, alpha):
    q, t = pairs(B, d, seed)
    a = tcl_loss(Tensor(q), Tensor(t)).item()
    b = tcl_loss(Tensor(alpha * q), Tensor(t)).item()
    assert a == pytest.approx(b, rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([2, 4, 8]), st.sampled_from([4, 64]), st.integers(0, 2**31))
def test_bruteforce_property(B, d, seed):
    q, t = pairs(B, d, seed)
    assert tcl_loss(Tensor(q), Tensor(t)).item() == pytest.approx(tcl_bruteforce(q, t, 0.07), rel=1e-9)


def test_info_nce_perfect_alignment_low():
    e = np.eye(4)
    val = symmetric_info_nce(Tensor(e), Tensor(e), 0.07).item()
    assert val < 1e-5
