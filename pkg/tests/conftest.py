import numpy as np
import pytest

from rtdlab.encoder import EncoderParams
from rtdlab.grammar import GrammarConfig
from rtdlab.projection import PhiParams
from rtdlab.text import build_vocab
from rtdlab.triplets import TemplateSet


@pytest.fixture(scope="session")
def templates():
    return TemplateSet.load()


@pytest.fixture(scope="session")
def small_grammar():
    return GrammarConfig(n_subjects=8, n_attributes=3, n_contexts=6)


@pytest.fixture(scope="session")
def vocab(small_grammar, templates):
    world = [small_grammar.caption(t) for t in small_grammar.all_tuples()]
    return build_vocab(world, extra=list(templates.templates) + ["a photo of that"])


@pytest.fixture
def tiny_encoder(vocab):
    return EncoderParams.init(len(vocab), d=8, max_len=32, rng=np.random.default_rng(3))


@pytest.fixture
def tiny_phi():
    return PhiParams.init(8, depth=2, rng=np.random.default_rng(4))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
