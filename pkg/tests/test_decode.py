import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artasr.decode import (BeamHypothesis, DecodeConfig, NGramModel, beam_search, exhaustive_oracle,
                           greedy_decode, lm_logprob, load_ngram, save_ngram, train_ngram)


def _lp(rng, T, C, temp=1.5):
    x = rng.normal(size=(T, C)) * temp
    x -= x.max(axis=1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=1, keepdims=True))


def _onehot_path(path, C):
    lp = np.full((len(path), C), math.log(1e-6))
    for t, k in enumerate(path):
        lp[t, k] = math.log(1 - (C - 1) * 1e-6)
    return lp


@pytest.mark.parametrize("path,expected", [
    ([1, 1, 0, 1], [1, 1]),
    ([0, 0, 0], []),
    ([2, 2, 2, 1, 1], [2, 1]),
    ([1, 0, 0, 1, 2, 0], [1, 1, 2]),
    ([0, 2, 0, 2, 2, 0], [2, 2]),
])
def test_greedy_collapse(path, expected):
    assert greedy_decode(_onehot_path(path, 3), blank=0) == expected


def test_greedy_tie_takes_lowest_index():
    assert greedy_decode(np.zeros((1, 3)), blank=2) == [0]


def test_bigram_probability():
    lm = train_ngram(["abab"], order=2, k=0.5, vocab=["a", "b"])
    # counts after 'a': b x2 -> (2 + .5) / (2 + 1)
    assert lm.prob(["a"], "b") == pytest.approx(2.5 / 3)
    assert lm.prob([], "a") == pytest.approx(1.5 / 2)


def test_lm_normalizes_over_vocab():
    lm = train_ngram(["ab ba", "aab"], order=3, k=0.3)
    for ctx in ([], ["a"], ["b", " "], ["x", "y"]):
        total = sum(lm.prob(ctx, s) for s in lm.vocab)
        assert abs(total - 1.0) < 1e-12


def test_lm_unknown_symbol():
    lm = train_ngram(["ab"], order=2)
    with pytest.raises(KeyError):
        lm.prob([], "z")


@pytest.mark.parametrize("kwargs", [dict(order=0), dict(order=6), dict(k=0.0)])
def test_lm_bad_arguments(kwargs):
    with pytest.raises(ValueError):
        train_ngram(["ab"], **kwargs)


def test_lm_empty_corpus():
    with pytest.raises(ValueError, match="empty"):
        train_ngram([])


def test_lm_roundtrip(tmp_path):
    lm = train_ngram(["ab ba", "ba ab a"], order=3, k=0.25, vocab=["a", "b", " "])
    save_ngram(lm, tmp_path / "lm.txt")
    back = load_ngram(tmp_path / "lm.txt")
    assert back.order == 3 and back.k == 0.25 and back.vocab == lm.vocab
    assert back.counts == lm.counts
    save_ngram(back, tmp_path / "lm2.txt")
    assert (tmp_path / "lm.txt").read_bytes() == (tmp_path / "lm2.txt").read_bytes()


def test_lm_bad_header(tmp_path):
    (tmp_path / "x").write_text("hello\n")
    with pytest.raises(ValueError):
        load_ngram(tmp_path / "x")


@st.composite
def decode_instances(draw):
    V = draw(st.integers(1, 3))
    C = V + 1
    max_T = int(math.log(10 ** 4) / math.log(C))
    T = draw(st.integers(1, min(max_T, 6)))
    seed = draw(st.integers(0, 2 ** 31))
    alpha = draw(st.sampled_from([0.0, 0.5, 1.0]))
    beta = draw(st.sampled_from([0.0, 0.5, -0.5]))
    blank = draw(st.integers(0, V))
    return _lp(np.random.default_rng(seed), T, C), alpha, beta, blank


@settings(max_examples=60, deadline=None)
@given(decode_instances())
def test_saturated_beam_matches_oracle(inst):
    lp, alpha, beta, blank = inst
    T, C = lp.shape
    letters = iter("abc")
    symbols = ["_" if c == blank else next(letters) for c in range(C)]
    vocab = [s for s in symbols if s != "_"]
    text = "".join(ch for ch in "abcabbacca" if ch in vocab)
    lm = train_ngram([text], order=2, k=0.5, vocab=vocab)
    cfg = DecodeConfig(beam_width=10 ** 6, alpha=alpha, beta=beta, blank=blank)
    best = beam_search(lp, lm, cfg, symbols)[0]
    labels, score = exhaustive_oracle(lp, lm, cfg, symbols)
    assert best.prefix == labels
    assert abs(best.score - score) < 1e-9


def test_beam_without_lm_scores_are_ctc():
    lp = _lp(np.random.default_rng(5), 4, 3)
    hyps = beam_search(lp, None, DecodeConfig(beam_width=100, alpha=0.0, beta=0.0, blank=0))
    assert all(isinstance(h, BeamHypothesis) for h in hyps)
    # total probability over all label sequences is one
    assert abs(sum(math.exp(h.ctc_logprob) for h in hyps) - 1.0) < 1e-12
    assert hyps == sorted(hyps, key=lambda h: (-h.score, h.prefix))


def test_width_one_no_lm_peaky_equals_greedy():
    lp = _onehot_path([1, 1, 0, 2, 2, 0, 1], 3)
    best = beam_search(lp, None, DecodeConfig(beam_width=1, alpha=0.0, beta=0.0, blank=0))[0]
    assert list(best.prefix) == greedy_decode(lp, 0)


def test_lm_needs_symbols():
    lm = train_ngram(["ab"], order=2)
    with pytest.raises(ValueError, match="symbol"):
        beam_search(np.zeros((2, 3)), lm, DecodeConfig(blank=0))


def test_lm_steers_ambiguous_frame():
    # acoustics split evenly between 'a' and 'b'; the LM only ever saw 'b'
    lp = np.log(np.array([[0.02, 0.49, 0.49]]))
    lm = train_ngram(["bbb"], order=1, k=0.1, vocab=["a", "b"])
    best = beam_search(lp, lm, DecodeConfig(beam_width=4, alpha=1.0, beta=0.0, blank=0), ["_", "a", "b"])[0]
    assert best.prefix == (2,)


def test_decode_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(beam_width=0)


def test_lm_logprob():
    lm = NGramModel(1, ("a", "b"), 1.0, {(): {"a": 1}})
    assert lm_logprob(lm, [], "a") == pytest.approx(math.log(2 / 3))
