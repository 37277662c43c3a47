import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esci_ensemble.core import DataError, QueryProductPair, SignalKind
from esci_ensemble.graphstore import (
    GraphSet,
    Subgraph,
    SubgraphCache,
    build_cache,
    extract,
    load_edges,
    write_edges,
)

from oracles import extract_oracle, random_edges

S = SignalKind

# q1 - p1 - q2 - p2 - q3: a path, so hop counts are easy to read off
PATH = [
    ("q1", "p1", S.CLICKS, 2.0),
    ("q2", "p1", S.PURCHASES, 1.0),
    ("q2", "p2", S.IMPRESSIONS, 5.0),
    ("q3", "p2", S.ADDS, 1.0),
]


@pytest.fixture
def path_graph():
    return GraphSet.from_edges(PATH)


class TestGraphSet:
    def test_union_sums_signals(self):
        g = GraphSet.from_edges([("a", "b", S.CLICKS, 1.0), ("a", "b", S.ADDS, 2.5)])
        assert g[S.ANY].weight("q:a", "p:b") == 3.5
        assert g[S.CLICKS].weight("p:b", "q:a") == 1.0

    def test_duplicates_summed(self):
        g = GraphSet.from_edges([("a", "b", S.CLICKS, 1.0), ("a", "b", S.CLICKS, 1.0)])
        assert g[S.CLICKS].weight("q:a", "p:b") == 2.0
        assert g[S.CLICKS].n_edges == 1

    def test_rejects_nonpositive(self):
        with pytest.raises(DataError):
            GraphSet.from_edges([("a", "b", S.CLICKS, 0.0)])

    def test_rejects_derived_signal(self):
        with pytest.raises(DataError):
            GraphSet.from_edges([("a", "b", S.ANY, 1.0)])

    def test_namespaces_do_not_collide(self):
        g = GraphSet.from_edges([("x", "x", S.CLICKS, 1.0)])
        assert g.n_nodes == 2
        assert g[S.CLICKS].neighbors("q:x") == {"p:x": 1.0}

    def test_edge_file_round_trip(self, tmp_path):
        write_edges(PATH, tmp_path / "e.tsv")
        g = load_edges(tmp_path / "e.tsv")
        assert g[S.IMPRESSIONS].weight("q:q2", "p:p2") == 5.0

    def test_edge_file_errors(self, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("query_id\tproduct_id\tsignal\tweight\nq\tp\tviews\t1\n")
        with pytest.raises(DataError, match=":2"):
            load_edges(bad)
        with pytest.raises(DataError):
            load_edges(tmp_path / "missing.tsv")


class TestExtract:
    def test_k0_only_anchors(self, path_graph):
        sub = extract(path_graph, "q2", "p1", k=0)
        assert sub.nodes == ("q:q2", "p:p1")
        assert sub.edges == (("q:q2", "p:p1", "purchases", 1.0),)

    def test_k1_path(self, path_graph):
        sub = extract(path_graph, "q2", "p1", k=1)
        # neighbors of both anchors; p2 (weight 5) before q1 (weight 2)
        assert sub.nodes == ("q:q2", "p:p1", "p:p2", "q:q1")
        assert {e[2] for e in sub.edges} == {"impressions", "clicks", "purchases"}
        assert sub.anchor_indices == (0, 1)

    def test_k2_reaches_end(self, path_graph):
        assert "q:q3" in extract(path_graph, "q2", "p1", k=2).nodes

    def test_cap_keeps_heaviest(self, path_graph):
        sub = extract(path_graph, "q2", "p1", k=2, cap=3)
        assert sub.nodes == ("q:q2", "p:p1", "p:p2")

    def test_unknown_anchor(self, path_graph):
        sub = extract(path_graph, "nobody", "p1", k=1)
        assert sub.nodes[:2] == ("q:nobody", "p:p1")
        assert "q:q1" in sub.nodes and "q:q2" in sub.nodes

    def test_bad_arguments(self, path_graph):
        with pytest.raises(ValueError):
            extract(path_graph, "q1", "p1", k=-1)
        with pytest.raises(ValueError):
            extract(path_graph, "q1", "p1", cap=1)

    def test_edge_arrays(self, path_graph):
        sub = extract(path_graph, "q2", "p1", k=1)
        u, v, t, w = sub.edge_arrays
        assert len(u) == len(sub.edges)
        for a, b, s, x, e in zip(u, v, t, w, sub.edges):
            assert (sub.nodes[a], sub.nodes[b], x) == (e[0], e[1], e[3])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 3), st.integers(2, 14))
    def test_matches_oracle(self, seed, k, cap):
        rng = np.random.default_rng(seed)
        edges, nq, npr = random_edges(rng, max_nodes=30)
        if not edges:
            return
        g = GraphSet.from_edges(edges)
        q, p = f"q{rng.integers(nq)}", f"p{rng.integers(npr)}"
        for c in (cap, 10_000):
            sub = extract(g, q, p, k, c)
            assert (sub.nodes, sub.edges) == extract_oracle(edges, q, p, k, c)


class TestCache:
    def _pairs(self):
        return [QueryProductPair(q, p, "t", "t", "us") for q, p in
                [("q1", "p1"), ("q2", "p2"), ("q3", "p2"), ("q2", "p1"), ("q1", "p1")]]

    def test_round_trip(self, tmp_path, path_graph):
        cache = build_cache(self._pairs(), path_graph, k=2, cap=10)
        cache.save(tmp_path / "c.jsonl")
        back = SubgraphCache.load(tmp_path / "c.jsonl")
        assert back.dumps() == cache.dumps()
        assert len(back) == 4  # duplicate pair stored once

    def test_worker_count_invariant(self, path_graph):
        one = build_cache(self._pairs(), path_graph, workers=1)
        many = build_cache(self._pairs(), path_graph, workers=3)
        assert one.dumps() == many.dumps()

    def test_without(self, path_graph):
        cache = build_cache(self._pairs(), path_graph)
        smaller = cache.without([("q1", "p1")])
        assert smaller.get_pair("q1", "p1") is None
        assert isinstance(smaller.get_pair("q2", "p2"), Subgraph)

    def test_bad_header(self, tmp_path):
        (tmp_path / "c.jsonl").write_text("nonsense\n")
        with pytest.raises(DataError):
            SubgraphCache.load(tmp_path / "c.jsonl")
