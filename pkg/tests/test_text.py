import pytest
from hypothesis import given, strategies as st

from rtdlab.text import (OOV, PAD, PSEUDO, RESERVED, TokenSeq, Vocabulary, build_vocab, detokenize,
                         normalize, pad_batch, tokenize)


def test_normalize_lowercases_and_splits_punctuation():
    assert normalize("A Red, dog!  in-the field.") == ["a", "red", "dog", "in", "the", "field"]


def test_vocab_order_frequency_then_lexicographic():
    v = build_vocab(["b a", "a c", "a b"])
    assert v.tokens == RESERVED + ("a", "b", "c")


def test_extra_tokens_appended_sorted():
    v = build_vocab(["dog"], extra=["zebra photo"])
    assert v.tokens[3:] == ("dog", "photo", "zebra")


def test_min_count_and_empty_corpus():
    assert "b" not in build_vocab(["a a b"], min_count=2)
    with pytest.raises(ValueError):
        build_vocab([])
    with pytest.raises(ValueError):
        build_vocab(["a"], min_count=0)


def test_unknown_word_maps_to_oov():
    v = build_vocab(["dog"])
    assert tokenize("cat", v).ids == (OOV,)
    assert "<pad>" not in v


def test_truncation():
    v = build_vocab(["a b c d"])
    assert len(tokenize("a b c d", v, max_len=2)) == 2


def test_pad_batch_mask():
    ids, mask = pad_batch([TokenSeq((3, 4, 5)), TokenSeq((6,))])
    assert ids.tolist() == [[3, 4, 5], [6, PAD, PAD]]
    assert mask.tolist() == [[True, True, True], [True, False, False]]
    with pytest.raises(ValueError):
        pad_batch([TokenSeq(())])


def test_pseudo_slots():
    assert TokenSeq((3, PSEUDO, 4)).pseudo_slots == (1,)


def test_vocab_save_load(tmp_path):
    v = build_vocab(["a red dog", "a blue cat"])
    v.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt") == v


@given(st.lists(st.sampled_from(["red", "dog", "field", "a", "the"]), min_size=1, max_size=10))
def test_tokenize_detokenize_roundtrip(words):
    v = build_vocab(["red dog field a the"])
    text = " ".join(words)
    assert detokenize(tokenize(text, v), v) == text
