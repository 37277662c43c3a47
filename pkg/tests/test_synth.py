import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esci_ensemble.core import read_pairs
from esci_ensemble.synth import (
    REFERENCE_SIGNAL_SHARES,
    SynthConfig,
    describe,
    describe_files,
    generate,
    write_dataset,
)


@pytest.fixture(scope="module")
def medium():
    return generate(SynthConfig(n_pairs=1500, seed=2))


class TestConfig:
    def test_edge_targets_count_label_rows(self):
        cfg = SynthConfig(n_pairs=2640)
        targets = cfg.edge_targets()
        total = sum(targets.values()) + cfg.n_pairs
        for s, pct in REFERENCE_SIGNAL_SHARES.items():
            assert 100 * targets[s] / total == pytest.approx(pct, abs=0.01)

    def test_validation(self):
        with pytest.raises(ValueError):
            SynthConfig(query_ambiguity=2).validate()
        with pytest.raises(ValueError):
            SynthConfig(signal_proportions={"clicks": 1}).validate()
        with pytest.raises(ValueError):
            SynthConfig.from_mapping({"n_pairs": 10, "colour": "red"})

    def test_record_round_trip(self):
        cfg = SynthConfig(n_pairs=10, seed=3)
        assert SynthConfig.from_mapping(cfg.to_record()) == cfg


class TestGenerate:
    def test_exact_counts(self, medium):
        d = describe(medium.pairs, medium.edges)
        assert d["edge_counts"] == medium.meta["targets"]
        assert len(medium.pairs) == 1500

    def test_no_duplicate_edges(self, medium):
        keys = [(q, p, s) for q, p, s, _ in medium.edges]
        assert len(set(keys)) == len(keys)
        assert all(w > 0 for *_, w in medium.edges)

    def test_unique_pairs_and_locales(self, medium):
        keys = [p.key for p in medium.pairs]
        assert len(set(keys)) == len(keys)
        assert {p.locale for p in medium.pairs} <= {"us", "es", "jp"}

    def test_label_priors(self, medium):
        counts = describe(medium.pairs, [])["label_counts"]
        priors = SynthConfig().label_priors()
        got = np.array([counts[w] for w in ("exact", "substitute", "complement", "irrelevant")]) / 1500
        np.testing.assert_allclose(got, priors, atol=0.04)

    def test_deterministic(self):
        a = generate(SynthConfig(n_pairs=200, seed=7))
        b = generate(SynthConfig(n_pairs=200, seed=7))
        assert a.pairs == b.pairs and a.edges == b.edges

    def test_strength_zero_removes_association(self):
        n = 2000
        cfg = SynthConfig(n_pairs=n, seed=1, strength={s: 0.0 for s in REFERENCE_SIGNAL_SHARES})
        d = generate(cfg).meta["realized"]
        # no planted effect: correlations stay within sampling noise
        assert max(d["association"].values()) < 4 / np.sqrt(n)

    def test_dense_signals_weaker(self, medium):
        assoc = medium.meta["realized"]["association"]
        assert min(assoc["purchases"], assoc["adds"]) > max(assoc["clicks"], assoc["impressions"])

    def test_exact_pairs_share_category_tokens(self, medium):
        exact = [p for p in medium.pairs if p.label is not None and p.label.word == "exact"][:50]
        shared = [set(p.query_text.split()) & set(p.product_text.split()) for p in exact]
        assert np.mean([len(s) > 0 for s in shared]) > 0.9

    @pytest.mark.parametrize("n", [1, 6, 13])
    def test_tiny_sizes_have_exact_pairs(self, n):
        for seed in range(20):
            assert len(generate(SynthConfig(n_pairs=n, seed=seed)).pairs) == n

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 300), st.integers(0, 1000))
    def test_any_size_hits_targets(self, n, seed):
        ds = generate(SynthConfig(n_pairs=n, seed=seed))
        assert describe(ds.pairs, ds.edges)["edge_counts"] == SynthConfig(n_pairs=n).edge_targets()


class TestFiles:
    def test_write_and_describe(self, tmp_path):
        ds = generate(SynthConfig(n_pairs=120, seed=4))
        paths = write_dataset(ds, tmp_path / "data")
        assert read_pairs(paths["pairs"]) == ds.pairs
        assert describe_files(paths["pairs"], paths["edges"]) == describe(ds.pairs, ds.edges)
