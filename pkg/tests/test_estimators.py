import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from rtdlab.encoder import VisualSurrogate
from rtdlab.estimators import ProjectionPretrainer, RTDTextEncoder
from rtdlab.triplets import TextTriplet


def test_pretrainer_fit_transform(tiny_encoder, vocab, small_grammar):
    sur = VisualSurrogate.draw(8, 0.3, 0.01, np.random.default_rng(0))
    est = ProjectionPretrainer(tiny_encoder, vocab, sur, steps=5, batch_size=8)
    with pytest.raises(NotFittedError):
        est.transform(np.zeros((1, 8)))
    est.fit(small_grammar.sample_corpus(20, np.random.default_rng(1)))
    assert est.transform(np.ones((3, 8))).shape == (3, 8)
    with pytest.raises(ValueError):
        est.transform(np.ones((3, 5)))
    assert clone(est).get_params()["steps"] == 5


def test_rtd_encoder_fit_transform_compose(tiny_encoder, tiny_phi, vocab):
    trips = [TextTriplet("a red dog in the field", "replace dog with cat", "a red cat in the field",
                         "dog", "cat", 0),
             TextTriplet("a blue cat in the park", "change cat to dog", "a blue dog in the park",
                         "cat", "dog", 1)] * 4
    est = RTDTextEncoder(tiny_encoder, tiny_phi, vocab, steps=3, batch_size=4)
    assert est.set_params(lr=1e-2) is est
    est.fit(trips)
    emb = est.transform(["a red dog", "a blue cat"])
    assert emb.shape == (2, 8)
    assert np.allclose(np.linalg.norm(emb, axis=1), 1.0)
    q = est.compose(np.ones((2, 8)), ["is red", "is blue"])
    assert q.shape == (2, 8)
    with pytest.raises(TypeError):
        est.fit(["not a triplet"])
    with pytest.raises(ValueError):
        est.compose(np.ones((2, 8)), ["one"])
