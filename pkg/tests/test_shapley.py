import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esci_ensemble.gbdt import GbdtParams, train
from esci_ensemble.shapley import (
    GlobalImportance,
    explain,
    explain_brute_force,
    explain_rows,
    global_importance,
    model_shares,
    relation_shares,
    sample_background,
    write_report,
)

from oracles import random_ensemble, random_rows, shapley_oracle


class TestExactness:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 8))
        ens = random_ensemble(rng, d, int(rng.integers(1, 12)), int(rng.integers(1, 4)))
        X = random_rows(rng, 6, d)
        fast = explain(ens, X[0], X[1:])
        slow = explain_brute_force(ens, X[0], X[1:], class_index=fast.class_index)
        assert np.abs(fast.values() - slow.values()).max() <= 1e-9
        assert fast.base_value == pytest.approx(slow.base_value, abs=1e-12)

    def test_brute_force_matches_plain_enumeration(self):
        rng = np.random.default_rng(4)
        ens = random_ensemble(rng, 5, 8, 3)
        X = random_rows(rng, 4, 5)
        c = 2
        got = explain_brute_force(ens, X[0], X[1:], class_index=c).values()
        want = shapley_oracle(lambda M: ens.raw_scores(M)[:, c], X[0], X[1:])
        np.testing.assert_allclose(got, want, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_additivity(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(2, 12))
        ens = random_ensemble(rng, d, 12, 3)
        X, Z = random_rows(rng, 5, d), random_rows(rng, 7, d)
        phi, classes = explain_rows(ens, X, Z)
        scores = ens.raw_scores(X)[np.arange(5), classes]
        base = ens.raw_scores(Z)[:, classes].mean(axis=0)
        np.testing.assert_allclose(base + phi.sum(1), scores, atol=1e-9)

    def test_unused_feature_gets_zero(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(120, 3))
        y = (X[:, 0] > 0).astype(int) + 2 * (X[:, 1] > 0)
        X[:, 2] = 0.0
        ens = train(X, y, GbdtParams(iterations=3, learning_rate=0.5))
        a = explain(ens, X[0], X[1:20])
        assert a.per_feature["f2"] == 0.0

    def test_probability_output_is_additive(self):
        rng = np.random.default_rng(1)
        ens = random_ensemble(rng, 4, 8, 2)
        X = random_rows(rng, 5, 4)
        a = explain_brute_force(ens, X[0], X[1:], class_index=1, output="probability")
        p = ens.predict_proba(X[:1])[0, 1]
        assert a.total == pytest.approx(p, abs=1e-12)

    def test_input_checks(self):
        rng = np.random.default_rng(2)
        ens = random_ensemble(rng, 3, 2, 2)
        with pytest.raises(ValueError):
            explain(ens, np.zeros(4), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            explain(ens, np.zeros(3), np.zeros((0, 3)))
        with pytest.raises(ValueError):
            explain_brute_force(ens, np.zeros(3), np.zeros((1, 3)), max_features=2)


class TestImportance:
    def test_shares_sum_to_one(self):
        rng = np.random.default_rng(3)
        ens = random_ensemble(rng, 6, 8, 3)
        imp = global_importance(ens, random_rows(rng, 30, 6))
        assert sum(imp.shares.values()) == pytest.approx(1.0)
        assert set(imp.shares) == {"g0", "g1", "g2"}
        assert imp.ranked()[0][1] == max(imp.shares.values())

    def test_no_splits_spreads_evenly(self):
        from esci_ensemble.gbdt import FeatureColumn, FeatureSchema, RegressionTree, TreeEnsemble

        schema = FeatureSchema((FeatureColumn("a", "a"), FeatureColumn("b", "b")))
        ens = TreeEnsemble([[RegressionTree.leaf(0.0)] * 4], 1.0, np.zeros(4), np.ones(4), schema)
        assert global_importance(ens, np.zeros((3, 2))).shares == {"a": 0.5, "b": 0.5}

    def test_model_and_relation_shares(self, tmp_path):
        imp = GlobalImportance({}, {"sem": 1.0, "g1": 2.0, "g2": 1.0, "locale": 4.0})
        assert model_shares(imp) == {"sem": 0.25, "g1": 0.5, "g2": 0.25}
        rel = relation_shares(imp, {"g1": "clicks", "g2": "clicks", "sem": "text"})
        assert rel == {"clicks": 0.75, "text": 0.25}
        write_report(tmp_path / "r.tsv", model_shares(imp), rel)
        lines = (tmp_path / "r.tsv").read_text().splitlines()
        assert lines[0] == "table\tname\tshare" and lines[1].startswith("model\tg1")

    def test_background_sampling(self):
        X = np.arange(50.0).reshape(25, 2)
        assert sample_background(X, 100).shape == (25, 2)
        b = sample_background(X, 5, seed=1)
        assert b.shape == (5, 2)
        np.testing.assert_array_equal(b, sample_background(X, 5, seed=1))
