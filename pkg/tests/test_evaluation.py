import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import accuracy_score, f1_score

from esci_ensemble.core import EsciLabel
from esci_ensemble.evaluation import compare, comparison_table, confusion, score

E, S, C, I = (EsciLabel(i) for i in range(4))

labels = st.lists(st.integers(0, 3), min_size=1, max_size=60)


class TestScore:
    def test_hand_example(self):
        rep = score([E, E, S, I], [E, S, S, I])
        assert rep.accuracy == 0.75
        # E: p=1 r=.5 f=2/3; S: p=.5 r=1 f=2/3; I: 1; C absent everywhere
        assert rep.macro_f1 == pytest.approx((2 / 3 + 2 / 3 + 1) / 3)
        assert rep.weighted_f1 == pytest.approx((2 * 2 / 3 + 2 / 3 + 1) / 4)
        assert rep.per_class["complement"].support == 0

    @settings(max_examples=100)
    @given(st.data())
    def test_matches_sklearn(self, data):
        t = data.draw(labels)
        p = data.draw(st.lists(st.integers(0, 3), min_size=len(t), max_size=len(t)))
        rep = score(t, p)
        present = sorted(set(t) | set(p))
        assert rep.accuracy == pytest.approx(accuracy_score(t, p))
        assert rep.macro_f1 == pytest.approx(f1_score(t, p, labels=present, average="macro", zero_division=0))
        assert rep.weighted_f1 == pytest.approx(
            f1_score(t, p, labels=[0, 1, 2, 3], average="weighted", zero_division=0))

    def test_errors(self):
        with pytest.raises(ValueError):
            score([0, 1], [0])
        with pytest.raises(ValueError):
            score([], [])

    def test_confusion(self):
        m = confusion(np.array([0, 1, 1]), np.array([0, 0, 1]))
        assert m[1, 0] == 1 and m.sum() == 3

    def test_unknown_metric(self):
        with pytest.raises(ValueError):
            score([0], [0]).metric("auc")


class TestCompare:
    def test_order_and_table(self):
        reports = {"a": score([0, 1], [0, 0]), "b": score([0, 1], [0, 1]), "c": score([0, 1], [0, 0])}
        assert [n for n, _ in compare(reports)] == ["b", "a", "c"]
        lines = comparison_table(reports, "accuracy").splitlines()
        assert lines[0].split("\t") == ["rank", "model", "accuracy", "macro_f1", "weighted_f1"]
        assert lines[1].startswith("1\tb\t1.000000")

    def test_empty(self):
        with pytest.raises(ValueError):
            compare({})
