import json
from importlib import resources
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import reference_impl as ref
from zsal.text import (
    PAD_ID,
    TextInputError,
    TokenizedPrompt,
    TokenizerSpec,
    encode_text,
    tokenize,
    train_bpe,
    write_tokenizer_files,
)

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="module")
def clip_tokenizer():
    return TokenizerSpec.from_files(DATA / "clip_vocab.txt.gz", DATA / "clip_merges.txt.gz", 77)


@pytest.fixture(scope="module")
def toy_tokenizer(tiny_config):
    data = resources.files("zsal.data")
    return TokenizerSpec.from_files(data / "toy_vocab.txt", data / "toy_merges.txt", tiny_config.context_length)


GOLDEN = json.loads((DATA / "clip_tokenizer_golden.json").read_text(encoding="utf-8"))


@pytest.mark.parametrize("case", GOLDEN["cases"], ids=lambda c: c["text"][:24])
def test_matches_reference_tokenizer(clip_tokenizer, case):
    assert clip_tokenizer.sot_id == GOLDEN["sot"] and clip_tokenizer.eot_id == GOLDEN["eot"]
    assert list(tokenize(case["text"], clip_tokenizer).ids) == case["ids"]


def test_empty_text(clip_tokenizer):
    tp = tokenize("", clip_tokenizer)
    assert tp.ids[:2] == (clip_tokenizer.sot_id, clip_tokenizer.eot_id)
    assert set(tp.ids[2:]) == {PAD_ID} and tp.eot_index == 1


def test_case_folding_and_whitespace(clip_tokenizer):
    assert tokenize("A Photo", clip_tokenizer) == tokenize("a photo", clip_tokenizer)
    assert tokenize("a   photo\n", clip_tokenizer) == tokenize("a photo", clip_tokenizer)


def test_truncation_keeps_end_token(toy_tokenizer):
    tp = tokenize("bottle " * 100, toy_tokenizer)
    assert len(tp.ids) == toy_tokenizer.context_length
    assert tp.ids[-1] == toy_tokenizer.eot_id and tp.eot_index == len(tp.ids) - 1


@settings(max_examples=100, deadline=None)
@given(st.text(max_size=40))
def test_tokenizer_is_total(toy_tokenizer, text):
    tp = tokenize(text, toy_tokenizer)
    assert len(tp.ids) == toy_tokenizer.context_length
    assert tp.ids[tp.eot_index] == toy_tokenizer.eot_id
    assert all(0 <= i < toy_tokenizer.vocab_size for i in tp.ids)


def test_encode_text_unit_norm_and_deterministic(toy_tokenizer, tiny_store, tiny_config):
    tp = tokenize("a industrial photo of a perfect bottle", toy_tokenizer)
    a = encode_text(tp, tiny_store, tiny_config)
    b = encode_text(tp, tiny_store, tiny_config)
    assert a.shape == (tiny_config.embed_dim,)
    assert np.array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1) < 1e-5


def test_encode_text_matches_reference_forward(toy_tokenizer, tiny_store, tiny_config):
    tp = tokenize("a photo of the damaged screw", toy_tokenizer)
    # the reference runs the full padded context under the causal mask
    expected = ref.encode_text(tp.ids, tp.eot_index, tiny_store, tiny_config)
    np.testing.assert_allclose(encode_text(tp, tiny_store, tiny_config), expected, atol=1e-5)


def test_padding_after_eot_is_irrelevant(toy_tokenizer, tiny_store, tiny_config):
    tp = tokenize("a photo", toy_tokenizer)
    junk = tp.ids[: tp.eot_index + 1] + tuple(range(5, 5 + len(tp.ids) - tp.eot_index - 1))
    swapped = TokenizedPrompt(junk, tp.eot_index)
    assert np.array_equal(encode_text(tp, tiny_store, tiny_config), encode_text(swapped, tiny_store, tiny_config))


def test_out_of_range_id(tiny_store, tiny_config):
    bad = TokenizedPrompt((0, tiny_config.vocab_size, 0), 1)
    with pytest.raises(TextInputError):
        encode_text(bad, tiny_store, tiny_config)


def test_train_bpe_round_trip(tmp_path):
    vocab, merges = train_bpe(["a perfect bottle", "a perfect screw", "perfect"], 10)
    write_tokenizer_files(vocab, merges, tmp_path / "v.txt", tmp_path / "m.txt")
    spec = TokenizerSpec.from_files(tmp_path / "v.txt", tmp_path / "m.txt", 16)
    assert spec.vocab_size == 256 * 2 + 10 + 2
    assert spec.bpe("perfect") == ["perfect</w>"]
    assert len(spec.encode("bottle")) == 2
    assert train_bpe(["a perfect bottle", "a perfect screw", "perfect"], 10) == (vocab, merges)


def test_shipped_toy_vocab_matches_tiny_config(toy_tokenizer, tiny_config):
    assert toy_tokenizer.vocab_size == tiny_config.vocab_size
