import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from esci_ensemble.core import DataError, QueryProductPair
from esci_ensemble.denoiser import (
    SEP,
    Denoiser,
    assemble,
    denoise,
    fit_corpus,
    load_token_cache,
    save_token_cache,
    tfidf_scores,
    tokenize,
)

words = st.lists(st.sampled_from(list("abcdefgh")), min_size=0, max_size=30)


class TestTokenize:
    def test_lower_and_punct(self):
        assert tokenize("Red, SHOES_size-9!") == ["red", "shoes", "size", "9"]

    def test_unicode(self):
        assert tokenize("Zapato ROJO ñandú") == ["zapato", "rojo", "ñandú"]


class TestTfidf:
    def test_hand_example(self):
        stats = fit_corpus([["a", "b"], ["a", "c"], ["a"]])
        scores = tfidf_scores(["a", "b", "b"], stats)
        assert scores[0] == 0.0
        assert scores[1] == pytest.approx(2 * math.log(3))

    def test_keeps_order_and_budget(self):
        stats = fit_corpus([["the", "x"], ["the", "y"], ["the", "z"]])
        assert denoise(["the", "x", "the", "y"], stats, 2) == ["x", "y"]

    def test_ties_go_to_earlier(self):
        stats = fit_corpus([["a"], ["b"], ["c"]])
        assert denoise(["c", "b", "a"], stats, 2) == ["c", "b"]

    def test_bad_budget(self):
        with pytest.raises(ValueError):
            denoise(["a"], fit_corpus([["a"]]), 0)

    @given(words, st.integers(1, 10))
    def test_subsequence_property(self, toks, budget):
        stats = fit_corpus([toks or ["a"], ["a", "b"], ["c"]])
        out = denoise(toks, stats, budget)
        assert len(out) == min(budget, len(toks))
        it = iter(toks)
        assert all(t in it for t in out)  # order-preserving subsequence


class TestAssemble:
    def test_layout(self):
        seq = assemble(["q"], ["a", "b", "c"], max_len=4)
        assert seq.tokens == ("q", SEP, "a", "b")
        assert seq.query_tokens == ("q",) and seq.product_tokens == ("a", "b")

    def test_query_too_long(self):
        with pytest.raises(ValueError):
            assemble(["q"] * 4, [], max_len=4)

    @given(words, words, st.integers(2, 40))
    def test_length_bound(self, q, p, max_len):
        if len(q) > max_len - 1:
            return
        assert len(assemble(q, p, max_len).tokens) <= max_len


def _pairs():
    return [
        QueryProductPair("q1", "p1", "shoe", "shoe red leather shoe", "us"),
        QueryProductPair("q2", "p2", "zapato", "zapato rojo cuero", "es"),
        QueryProductPair("q3", "p3", "shoe", "shoe blue canvas", "us"),
        QueryProductPair("q1", "p1", "shoe", "ignored duplicate text", "us"),
    ]


class TestDenoiser:
    def test_one_document_per_product(self):
        d = Denoiser(budget=2).fit(_pairs())
        assert d.global_stats.doc_count == 3

    def test_per_locale_falls_back(self):
        d = Denoiser(per_locale=True).fit(_pairs())
        assert d.stats_for("es").doc_count == 1
        assert d.stats_for("jp") is d.global_stats

    def test_unfitted(self):
        with pytest.raises(RuntimeError):
            Denoiser().stats_for("us")

    def test_cached_tokens_used(self):
        d = Denoiser(budget=2).fit(_pairs())
        seq = d.sequence(_pairs()[0], cached={"p1": ["x"]})
        assert seq.product_tokens == ("x",)

    def test_record_round_trip(self):
        d = Denoiser(budget=2, per_locale=True).fit(_pairs())
        e = Denoiser.from_record(d.to_record())
        assert [e.sequence(p) for p in _pairs()] == [d.sequence(p) for p in _pairs()]

    def test_token_cache_round_trip(self, tmp_path):
        save_token_cache({"p1": ["a", "b"], "p2": []}, tmp_path / "t.jsonl")
        assert load_token_cache(tmp_path / "t.jsonl") == {"p1": ["a", "b"], "p2": []}
        (tmp_path / "bad").write_text("x\n")
        with pytest.raises(DataError):
            load_token_cache(tmp_path / "bad")
