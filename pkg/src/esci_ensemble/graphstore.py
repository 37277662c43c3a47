"""Behavior graphs, k-hop neighborhood extraction and the subgraph cache.

Node ids are namespaced so query and product ids never collide: a query
``"q17"`` becomes node ``"q:q17"`` and a product ``"b0042"`` becomes
``"p:b0042"``.
"""

from __future__ import annotations

import csv
import json
import multiprocessing
from collections.abc import Mapping
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .core import BASE_SIGNALS, DataError, QueryProductPair, SignalKind

CACHE_HEADER = "# esci-subgraph-cache v1"
UNION_KEY = "union"
DEFAULT_HOPS = 2
DEFAULT_CAP = 100


def query_node(query_id: str) -> str:
    return "q:" + query_id


def product_node(product_id: str) -> str:
    return "p:" + product_id


def is_query_node(node: str) -> bool:
    return node.startswith("q:")


class BehaviorGraph:
    """Weighted, undirected bipartite adjacency for one signal.

    The matrix is square over the shared node index of the owning
    :class:`GraphSet`; every edge is stored in both directions.
    """

    def __init__(self, signal: SignalKind, adjacency: sp.csr_matrix, node_ids, index):
        self.signal = signal
        self.adjacency = adjacency
        self._node_ids = node_ids
        self._index = index

    def degree(self, node: str) -> int:
        i = self._index.get(node)
        if i is None:
            return 0
        return int(self.adjacency.indptr[i + 1] - self.adjacency.indptr[i])

    def weight(self, u: str, v: str) -> float:
        i, j = self._index.get(u), self._index.get(v)
        if i is None or j is None:
            return 0.0
        return float(self.adjacency[i, j])

    def neighbors(self, node: str) -> dict[str, float]:
        i = self._index.get(node)
        if i is None:
            return {}
        a = self.adjacency
        lo, hi = a.indptr[i], a.indptr[i + 1]
        return {self._node_ids[j]: float(w) for j, w in zip(a.indices[lo:hi], a.data[lo:hi])}

    @property
    def n_edges(self) -> int:
        return self.adjacency.nnz // 2


class GraphSet(Mapping):
    """All per-signal graphs over one node index, plus the summed ``ANY`` graph.

    Behaves as a read-only mapping ``SignalKind -> BehaviorGraph``. The
    ``HET_ALL`` signal is not a separate graph: it is served by the five
    base graphs together.
    """

    def __init__(self, node_ids: Sequence[str], matrices: dict[SignalKind, sp.csr_matrix]):
        self.node_ids = list(node_ids)
        self.index = {n: i for i, n in enumerate(self.node_ids)}
        self.is_query = np.array([is_query_node(n) for n in self.node_ids], dtype=bool)
        # rank of each node id in lexicographic order, for tie-breaking
        order = sorted(range(len(self.node_ids)), key=self.node_ids.__getitem__)
        self.name_rank = np.empty(len(self.node_ids), dtype=np.int64)
        self.name_rank[order] = np.arange(len(self.node_ids))
        n = len(self.node_ids)
        graphs = {}
        total = sp.csr_matrix((n, n))
        for signal in BASE_SIGNALS:
            m = matrices.get(signal)
            m = sp.csr_matrix((n, n)) if m is None else sp.csr_matrix(m)
            m.sort_indices()
            graphs[signal] = BehaviorGraph(signal, m, self.node_ids, self.index)
            total = total + m
        total = sp.csr_matrix(total)
        total.sort_indices()
        graphs[SignalKind.ANY] = BehaviorGraph(SignalKind.ANY, total, self.node_ids, self.index)
        self._graphs = graphs
        # per-signal weight of every entry of the union adjacency, for fast induced subgraphs
        keys = np.repeat(np.arange(n, dtype=np.int64), np.diff(total.indptr)) * n + total.indices
        self.typed_weights = np.zeros((total.nnz, len(BASE_SIGNALS)))
        for j, signal in enumerate(BASE_SIGNALS):
            m = graphs[signal].adjacency.tocoo()
            pos = np.searchsorted(keys, m.row.astype(np.int64) * n + m.col)
            self.typed_weights[pos, j] = m.data

    def __getitem__(self, signal: SignalKind) -> BehaviorGraph:
        return self._graphs[signal]

    def __iter__(self):
        return iter(self._graphs)

    def __len__(self):
        return len(self._graphs)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[str, str, SignalKind, float]]) -> "GraphSet":
        """Build from ``(query_id, product_id, signal, weight)`` tuples.

        Repeated ``(query, product, signal)`` triples have their weights summed.
        """
        rows: dict[SignalKind, tuple[list, list, list]] = {s: ([], [], []) for s in BASE_SIGNALS}
        index: dict[str, int] = {}
        for q, p, signal, w in edges:
            if not signal.is_base:
                raise DataError(f"edges must use a base signal, got {signal.value!r}")
            w = float(w)
            if not w > 0 or not np.isfinite(w):
                raise DataError(f"edge ({q}, {p}, {signal.value}) has nonpositive weight {w!r}")
            qi = index.setdefault(query_node(q), len(index))
            pi = index.setdefault(product_node(p), len(index))
            r, c, d = rows[signal]
            r.append(qi)
            c.append(pi)
            d.append(w)
        n = len(index)
        matrices = {}
        for signal, (r, c, d) in rows.items():
            half = sp.coo_matrix((d, (r, c)), shape=(n, n)).tocsr()
            half.sum_duplicates()
            matrices[signal] = (half + half.T).tocsr()
        node_ids = [None] * n
        for name, i in index.items():
            node_ids[i] = name
        return cls(node_ids, matrices)


def load_edges(path) -> GraphSet:
    """Read a tab-separated edge file ``query_id, product_id, signal, weight``."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"edge file not found: {path}")

    def records():
        with path.open(encoding="utf-8", newline="") as fh:
            for lineno, fields in enumerate(csv.reader(fh, delimiter="\t"), start=1):
                if not fields or (lineno == 1 and fields[0] == "query_id"):
                    continue
                if len(fields) != 4:
                    raise DataError(f"{path}:{lineno}: expected 4 columns, got {len(fields)}")
                q, p, s, w = fields
                try:
                    signal = SignalKind.parse(s)
                    weight = float(w)
                except DataError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad weight {w!r}") from None
                if not weight > 0:
                    raise DataError(f"{path}:{lineno}: nonpositive weight {weight!r}")
                yield q, p, signal, weight

    return GraphSet.from_edges(records())


def write_edges(edges: Iterable[tuple[str, str, SignalKind, float]], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["query_id", "product_id", "signal", "weight"])
        for q, p, signal, w in edges:
            writer.writerow([q, p, signal.value, repr(float(w))])


@dataclass(frozen=True)
class Subgraph:
    nodes: tuple[str, ...]
    edges: tuple[tuple[str, str, str, float], ...]
    anchor_indices: tuple[int, int] = (0, 1)

    def to_record(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "edges": [list(e) for e in self.edges],
            "anchors": list(self.anchor_indices),
        }

    @classmethod
    def from_record(cls, record: dict) -> "Subgraph":
        return cls(
            tuple(record["nodes"]),
            tuple((u, v, s, float(w)) for u, v, s, w in record["edges"]),
            tuple(record["anchors"]),
        )

    @cached_property
    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Edges as ``(query position, product position, signal index, weight)`` arrays."""
        pos = {n: i for i, n in enumerate(self.nodes)}
        sig = {s.value: j for j, s in enumerate(BASE_SIGNALS)}
        m = len(self.edges)
        u = np.fromiter((pos[e[0]] for e in self.edges), dtype=np.int64, count=m)
        v = np.fromiter((pos[e[1]] for e in self.edges), dtype=np.int64, count=m)
        t = np.fromiter((sig[e[2]] for e in self.edges), dtype=np.int64, count=m)
        w = np.fromiter((e[3] for e in self.edges), dtype=float, count=m)
        return u, v, t, w

    def edges_for(self, signal: SignalKind) -> list[tuple[str, str, str, float]]:
        if signal is SignalKind.ANY or signal is SignalKind.HET_ALL:
            return list(self.edges)
        return [e for e in self.edges if e[2] == signal.value]


def _gather(csr: sp.csr_matrix, rows: np.ndarray):
    starts, ends = csr.indptr[rows], csr.indptr[rows + 1]
    if len(rows) == 0:
        return np.empty(0, np.int64), np.empty(0)
    cols = np.concatenate([csr.indices[a:b] for a, b in zip(starts, ends)])
    weights = np.concatenate([csr.data[a:b] for a, b in zip(starts, ends)])
    return cols, weights


def extract(
    graphs: GraphSet,
    query_id: str,
    product_id: str,
    k: int = DEFAULT_HOPS,
    cap: int = DEFAULT_CAP,
) -> Subgraph:
    """Breadth-first k-hop neighborhood around both anchors, capped at ``cap`` nodes.

    Traversal runs over the union of all base signals. When the cap binds,
    nodes are kept in order: anchors, ascending hop distance, descending
    summed edge weight to the previous BFS level, then node id.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if cap < 2:
        raise ValueError("cap must be >= 2")
    anchors = [query_node(query_id), product_node(product_id)]
    union = graphs[SignalKind.ANY].adjacency
    known = [graphs.index[a] for a in anchors if a in graphs.index]
    visited = np.array(known, dtype=np.int64)
    kept: list[int] = list(known)
    frontier = visited
    budget = cap - 2
    n_new = 0
    for _ in range(k):
        if n_new >= budget or len(frontier) == 0:
            break
        cols, weights = _gather(union, frontier)
        if len(cols) == 0:
            break
        uniq, inverse = np.unique(cols, return_inverse=True)
        summed = np.bincount(inverse, weights=weights)
        fresh = ~np.isin(uniq, visited)
        uniq, summed = uniq[fresh], summed[fresh]
        if len(uniq) == 0:
            break
        order = np.lexsort((graphs.name_rank[uniq], -summed))
        level = uniq[order]
        kept.extend(level.tolist())
        visited = np.concatenate([visited, level])
        n_new += len(level)
        frontier = level
    kept_known = [i for i in kept if i not in known][:budget]
    node_idx = np.array(known + kept_known, dtype=np.int64)
    names = anchors + [graphs.node_ids[i] for i in kept_known]

    edges = []
    if len(node_idx):
        # positions in ``names``: anchors may be unknown, so map through the name list
        local = {name: pos for pos, name in enumerate(names)}
        pos_of = np.array([local[graphs.node_ids[i]] for i in node_idx], dtype=np.int64)
        starts, ends = union.indptr[node_idx], union.indptr[node_idx + 1]
        counts = ends - starts
        entry = np.repeat(starts - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts) + np.arange(counts.sum())
        src = np.repeat(np.arange(len(node_idx)), counts)
        dst_global = union.indices[entry]
        inside = np.isin(dst_global, node_idx)
        entry, src, dst_global = entry[inside], src[inside], dst_global[inside]
        is_q = graphs.is_query[node_idx[src]]
        entry, src, dst_global = entry[is_q], src[is_q], dst_global[is_q]
        lookup = dict(zip(node_idx.tolist(), range(len(node_idx))))
        dst = np.array([lookup[d] for d in dst_global.tolist()], dtype=np.int64)
        tw = graphs.typed_weights[entry]
        rows, sigs = np.nonzero(tw)
        # edges are (query node, product node, signal, weight), ordered by signal then position
        order = np.lexsort((pos_of[dst[rows]], pos_of[src[rows]], sigs))
        for r, j in zip(rows[order].tolist(), sigs[order].tolist()):
            edges.append((graphs.node_ids[node_idx[src[r]]], graphs.node_ids[node_idx[dst[r]]],
                          BASE_SIGNALS[j].value, float(tw[r, j])))
    return Subgraph(tuple(names), tuple(edges), (0, 1))


class SubgraphCache(Mapping):
    """Read-only exact-match map ``(query_id, product_id, "union") -> Subgraph``."""

    def __init__(self, entries: Optional[dict] = None):
        self._entries = MappingProxyType(dict(entries or {}))

    def __getitem__(self, key):
        return self._entries[key]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def get_pair(self, query_id: str, product_id: str) -> Optional[Subgraph]:
        return self._entries.get((query_id, product_id, UNION_KEY))

    def without(self, keys: Iterable[tuple[str, str]]) -> "SubgraphCache":
        """Copy of this cache with the given ``(query_id, product_id)`` pairs dropped."""
        drop = {(q, p, UNION_KEY) for q, p in keys}
        return SubgraphCache({k: v for k, v in self._entries.items() if k not in drop})

    def dumps(self) -> str:
        lines = [CACHE_HEADER]
        for (q, p, s), sub in self._entries.items():
            record = {"query_id": q, "product_id": p, "signal": s, **sub.to_record()}
            lines.append(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SubgraphCache":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"subgraph cache not found: {path}")
        entries = {}
        with path.open(encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if header != CACHE_HEADER:
                raise DataError(f"{path}: unsupported cache header {header!r}")
            for line in fh:
                if not line.strip():
                    continue
                record = json.loads(line)
                key = (record["query_id"], record["product_id"], record["signal"])
                entries[key] = Subgraph.from_record(record)
        return cls(entries)


_WORKER_GRAPHS: Optional[GraphSet] = None


def _init_worker(graphs):
    global _WORKER_GRAPHS
    _WORKER_GRAPHS = graphs


def _extract_chunk(args):
    keys, k, cap = args
    return [extract(_WORKER_GRAPHS, q, p, k, cap) for q, p in keys]


def build_cache(
    pairs: Sequence[QueryProductPair],
    graphs: GraphSet,
    k: int = DEFAULT_HOPS,
    cap: int = DEFAULT_CAP,
    workers: int = 1,
) -> SubgraphCache:
    """Extract every pair's neighborhood, fanning out over ``workers`` processes.

    Keys keep first-appearance order so the cache content, and its
    serialization, is identical for any worker count.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    keys = list(dict.fromkeys(p.key for p in pairs))
    if workers == 1 or len(keys) < 2:
        subgraphs = [extract(graphs, q, p, k, cap) for q, p in keys]
    else:
        n_chunks = min(len(keys), workers * 4)
        bounds = np.linspace(0, len(keys), n_chunks + 1).astype(int)
        chunks = [(keys[a:b], k, cap) for a, b in zip(bounds[:-1], bounds[1:])]
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(workers, mp_context=ctx, initializer=_init_worker, initargs=(graphs,)) as pool:
            subgraphs = [s for chunk in pool.map(_extract_chunk, chunks) for s in chunk]
    return SubgraphCache({(q, p, UNION_KEY): s for (q, p), s in zip(keys, subgraphs)})
