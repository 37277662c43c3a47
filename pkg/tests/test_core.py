import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esci_ensemble.core import (
    DataError,
    EsciLabel,
    LabelDistribution,
    PredictionRow,
    QueryProductPair,
    SignalKind,
    labels_array,
    read_pairs,
    read_predictions,
    softmax,
    write_pairs,
    write_predictions,
)


def _pair(i, label=EsciLabel.EXACT):
    return QueryProductPair(f"q{i}", f"p{i}", "red shoe", "red running shoe", "us", label)


class TestLabels:
    def test_codes(self):
        assert [int(x) for x in EsciLabel] == [0, 1, 2, 3]
        assert EsciLabel.parse(" Complement ") is EsciLabel.COMPLEMENT

    def test_unknown_label(self):
        with pytest.raises(DataError):
            EsciLabel.parse("maybe")

    def test_signal_parse(self):
        assert SignalKind.parse("HET_ALL") is SignalKind.HET_ALL
        assert SignalKind.PURCHASES.is_base and not SignalKind.ANY.is_base
        with pytest.raises(DataError):
            SignalKind.parse("views")


class TestLabelDistribution:
    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError):
            LabelDistribution((0.5, 0.5, 0.5, 0.0))

    def test_rejects_wrong_length(self):
        with pytest.raises(ValueError):
            LabelDistribution((1.0, 0.0, 0.0))

    def test_argmax(self):
        assert LabelDistribution((0.1, 0.2, 0.6, 0.1)).argmax is EsciLabel.COMPLEMENT

    @given(st.lists(st.floats(-50, 50), min_size=4, max_size=4))
    def test_softmax_is_distribution(self, scores):
        dist = LabelDistribution.from_array(softmax(np.array(scores)))
        assert abs(sum(dist.probs) - 1) < 1e-9


class TestPairsIO:
    def test_round_trip(self, tmp_path):
        pairs = [_pair(i, EsciLabel(i % 4)) for i in range(6)] + [_pair(9, None)]
        path = tmp_path / "pairs.jsonl"
        write_pairs(pairs, path)
        assert read_pairs(path) == pairs

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "p.jsonl"
        write_pairs([_pair(0)], path)
        path.write_text("\n" + path.read_text() + "\n\n")
        assert len(read_pairs(path)) == 1

    def test_error_names_line(self, tmp_path):
        path = tmp_path / "p.jsonl"
        good = json.dumps(_pair(0).to_record())
        path.write_text(good + "\n" + json.dumps({"query_id": "q"}) + "\n")
        with pytest.raises(DataError, match="line 2"):
            read_pairs(path)

    def test_bad_label(self, tmp_path):
        rec = _pair(0).to_record()
        rec["label"] = "great"
        path = tmp_path / "p.jsonl"
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(DataError, match="line 1"):
            read_pairs(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_pairs(tmp_path / "none.jsonl")

    def test_labels_array_requires_labels(self):
        assert labels_array([_pair(0, EsciLabel.IRRELEVANT)]).tolist() == [3]
        with pytest.raises(DataError):
            labels_array([_pair(0, None)])


class TestPredictionsIO:
    def test_round_trip_with_errors(self, tmp_path):
        d = LabelDistribution((0.1, 0.2, 0.3, 0.4))
        rows = [PredictionRow(0, d, EsciLabel.IRRELEVANT), PredictionRow(1, None, None)]
        path = tmp_path / "pred.tsv"
        write_predictions(rows, path)
        back = read_predictions(path)
        assert back[0].distribution == d and back[0].predicted is EsciLabel.IRRELEVANT
        assert back[1].is_error

    def test_bad_header(self, tmp_path):
        path = tmp_path / "pred.tsv"
        path.write_text("a\tb\n")
        with pytest.raises(DataError):
            read_predictions(path)

    @settings(max_examples=25)
    @given(st.lists(st.floats(0.01, 10), min_size=4, max_size=4))
    def test_probabilities_survive_text(self, tmp_path_factory, raw):
        p = np.array(raw) / np.sum(raw)
        d = LabelDistribution.from_array(p)
        path = tmp_path_factory.mktemp("pred") / "p.tsv"
        write_predictions([(0, d, d.argmax)], path)
        assert read_predictions(path)[0].distribution == d
