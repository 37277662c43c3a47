"""Degree-normalized message-passing candidate over a pair's k-hop subgraph.

Layer update, per relation ``r`` of the candidate's signal::

    H_{k+1} = relu( sum_r  D_r^(zeta-1) (A_r + I) D_r^zeta  H_k  W_{k,r} )

where ``D_r`` is the weighted degree of ``A_r + I``. A single-signal candidate
has one relation; the ``hetall`` candidate keeps the five base signals as
separate relations with their own weights. The head reads the two anchor
rows of the last layer, concatenated, through an affine map and a softmax.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from ..core import BASE_SIGNALS, N_LABELS, DataError, LabelDistribution, QueryProductPair, SignalKind, softmax
from ..denoiser import tokenize
from ..graphstore import GraphSet, Subgraph, is_query_node, product_node, query_node
from .base import CHECKPOINT_VERSION, Candidate, CandidateError, CandidateInputs, array_from_record, array_record

NODE_TABLE_VERSION = "esci-node-features v1"
DEFAULT_TEXT_DIM = 12
DEGREE_BUCKETS = 4
ANCHOR_BITS = 2
PREDICT_BATCH = 256


def degree_bucket(degree: int) -> int:
    """0 for isolated, then ``ceil(log2(deg + 1))`` capped at 3."""
    if degree <= 0:
        return 0
    return min(DEGREE_BUCKETS - 1, int(np.ceil(np.log2(degree + 1))))


def text_bag(text: str, d_text: int) -> np.ndarray:
    """L2-normalized hashed token counts."""
    v = np.zeros(d_text)
    for tok in tokenize(text):
        v[zlib.crc32(tok.encode("utf-8")) % d_text] += 1.0
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def base_feature_dim(d_text: int) -> int:
    return 1 + len(BASE_SIGNALS) * DEGREE_BUCKETS + d_text


def feature_dim(d_text: int = DEFAULT_TEXT_DIM) -> int:
    """Node feature width including the two anchor indicator bits."""
    return base_feature_dim(d_text) + ANCHOR_BITS


def _node_vector(is_query: bool, degrees: Sequence[int], text: Optional[str], d_text: int) -> np.ndarray:
    v = np.zeros(base_feature_dim(d_text))
    v[0] = 1.0 if is_query else 0.0
    for s, deg in enumerate(degrees):
        v[1 + s * DEGREE_BUCKETS + degree_bucket(deg)] = 1.0
    if text:
        v[1 + len(BASE_SIGNALS) * DEGREE_BUCKETS :] = text_bag(text, d_text)
    return v


class NodeFeatureTable:
    """Initial node features: node-type bit, per-signal degree buckets, hashed text bag."""

    def __init__(self, node_ids: Sequence[str], matrix: np.ndarray, d_text: int = DEFAULT_TEXT_DIM):
        self.node_ids = list(node_ids)
        self.index = {n: i for i, n in enumerate(self.node_ids)}
        self._memo: dict = {}
        self.matrix = np.asarray(matrix, dtype=float).reshape(len(self.node_ids), base_feature_dim(d_text))
        self.d_text = d_text

    @property
    def dim(self) -> int:
        return feature_dim(self.d_text)

    @classmethod
    def build(cls, graphs: GraphSet, pairs: Sequence[QueryProductPair], d_text: int = DEFAULT_TEXT_DIM):
        texts: dict[str, str] = {}
        for pair in pairs:
            texts.setdefault(query_node(pair.query_id), pair.query_text)
            texts.setdefault(product_node(pair.product_id), pair.product_text)
        names = sorted(set(graphs.node_ids) | set(texts))
        degs = np.zeros((len(names), len(BASE_SIGNALS)), dtype=np.int64)
        for s, signal in enumerate(BASE_SIGNALS):
            counts = np.diff(graphs[signal].adjacency.indptr)
            for i, n in enumerate(names):
                j = graphs.index.get(n)
                if j is not None:
                    degs[i, s] = counts[j]
        matrix = np.stack([_node_vector(is_query_node(n), degs[i], texts.get(n), d_text) for i, n in enumerate(names)]) \
            if names else np.zeros((0, base_feature_dim(d_text)))
        return cls(names, matrix, d_text)

    def node_vector(self, node: str, text: Optional[str] = None) -> np.ndarray:
        i = self.index.get(node)
        if i is not None:
            return self.matrix[i]
        return _node_vector(is_query_node(node), [0] * len(BASE_SIGNALS), text, self.d_text)

    def featurize(self, sub: Subgraph, pair: Optional[QueryProductPair] = None) -> np.ndarray:
        """``h0`` for a subgraph: table rows plus anchor bits; anchors unknown to
        the table fall back to the pair's own texts."""
        return self.featurize_many([sub], [pair])[0]

    def _row_index(self, sub: Subgraph) -> np.ndarray:
        # memo keyed by identity; the subgraph is kept alive so ids are not reused
        hit = self._memo.get(id(sub))
        if hit is None or hit[0] is not sub:
            idx = np.fromiter((self.index.get(n, -1) for n in sub.nodes), dtype=np.int64, count=len(sub.nodes))
            hit = self._memo[id(sub)] = (sub, idx)
        return hit[1]

    def featurize_many(self, subs: Sequence[Subgraph], pairs: Sequence[Optional[QueryProductPair]]) -> list[np.ndarray]:
        idx = np.concatenate([self._row_index(sub) for sub in subs]) if subs else np.zeros(0, np.int64)
        base = self.dim - ANCHOR_BITS
        H = np.zeros((len(idx), self.dim))
        found = idx >= 0
        H[found, :base] = self.matrix[idx[found]]
        out = []
        off = 0
        for sub, pair in zip(subs, pairs):
            n = len(sub.nodes)
            h = H[off : off + n]
            iq, ip = sub.anchor_indices
            for pos in np.flatnonzero(idx[off : off + n] < 0):
                text = None
                if pair is not None:
                    text = pair.query_text if pos == iq else pair.product_text if pos == ip else None
                h[pos, :base] = self.node_vector(sub.nodes[pos], text)
            h[iq, -2] = 1.0
            h[ip, -1] = 1.0
            out.append(h)
            off += n
        return out

    def to_record(self) -> dict:
        return {
            "version": NODE_TABLE_VERSION,
            "d_text": self.d_text,
            "nodes": self.node_ids,
            "data": self.matrix.ravel().tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "NodeFeatureTable":
        if rec.get("version") != NODE_TABLE_VERSION:
            raise DataError(f"unsupported node feature table version {rec.get('version')!r}")
        return cls(rec["nodes"], np.array(rec["data"], dtype=float), int(rec["d_text"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_record()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NodeFeatureTable":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"node feature table not found: {path}")
        return cls.from_record(json.loads(path.read_text(encoding="utf-8")))


def relations_for(signal: SignalKind) -> tuple[str, ...]:
    if signal is SignalKind.HET_ALL:
        return tuple(s.value for s in BASE_SIGNALS)
    if signal is SignalKind.ANY:
        return (SignalKind.ANY.value,)
    return (signal.value,)


@dataclass
class GnnParams:
    layers: int = 2
    zeta: float = 0.0
    learning_rate: float = 0.2
    epochs: int = 20
    batch_size: int = 64
    activation: str = "relu"
    edge_transform: str = "log1p"
    l2: float = 0.0
    class_weights: Optional[tuple[float, ...]] = None
    seed: int = 0

    def validate(self) -> None:
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if not 0.0 <= self.zeta <= 1.0:
            raise ValueError("zeta must lie in [0, 1]")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.edge_transform not in ("log1p", "identity"):
            raise ValueError(f"unknown edge transform {self.edge_transform!r}")


class _Batch:
    """Block-diagonal union of several subgraphs.

    ``op`` holds the normalized operators of all relations, shape
    ``(n, n * R)``: column ``j * R + r`` is column ``j`` of ``A_r``.
    """

    def __init__(self, op: sp.csr_matrix, n_rel: int, h0: np.ndarray, iq: np.ndarray, ip: np.ndarray):
        self.op = op
        self.op_t = op.T.tocsr()
        self.n_rel = n_rel
        self.h0 = h0
        self.iq = iq
        self.ip = ip


class _Prepared:
    """Per-dataset flat arrays from which mini-batches are cut without Python loops."""

    def __init__(self, subs: Sequence[Subgraph], h0s: Sequence[np.ndarray], relations, zeta: float, transform: str):
        counts = np.array([len(s.nodes) for s in subs], dtype=np.int64)
        self.node_ptr = np.concatenate([[0], np.cumsum(counts)])
        self.h0 = np.concatenate(h0s) if len(h0s) else np.zeros((0, 0))
        self.anchors = np.array([s.anchor_indices for s in subs], dtype=np.int64).reshape(-1, 2)
        n_total = int(self.node_ptr[-1])
        G = len(subs)
        arrays = [s.edge_arrays for s in subs]
        ecount = np.array([len(a[0]) for a in arrays], dtype=np.int64)
        goff = np.repeat(self.node_ptr[:-1], ecount)
        gid_e = np.repeat(np.arange(G), ecount)
        cat = (lambda j, dt: np.concatenate([a[j] for a in arrays]).astype(dt)) if G else (lambda j, dt: np.zeros(0, dt))
        U, V, S, W = cat(0, np.int64) + goff, cat(1, np.int64) + goff, cat(2, np.int64), cat(3, float)
        if transform == "log1p":
            W = np.log1p(W)
        loops = np.arange(n_total, dtype=np.int64)
        gid_n = np.repeat(np.arange(G), counts)
        sig_index = {s.value: j for j, s in enumerate(BASE_SIGNALS)}
        self.rel = []
        for rel in relations:
            keep = np.ones(len(S), dtype=bool) if rel == _ANY else S == sig_index[rel]
            u, v, w, gid = U[keep], V[keep], W[keep], gid_e[keep]
            # both directions plus self loops, grouped by graph
            R = np.concatenate([u, v, loops])
            C = np.concatenate([v, u, loops])
            Vals = np.concatenate([w, w, np.ones(n_total)])
            order = np.argsort(np.concatenate([gid, gid, gid_n]), kind="stable")
            R, C, Vals = R[order], C[order], Vals[order]
            per_graph = np.bincount(np.concatenate([gid, gid, gid_n]), minlength=G) if G else np.zeros(0, np.int64)
            eptr = np.concatenate([[0], np.cumsum(per_graph)]).astype(np.int64)
            deg = np.bincount(R, weights=Vals, minlength=n_total)
            deg[deg <= 0] = 1.0
            Vals = deg[R] ** (zeta - 1.0) * Vals * deg[C] ** zeta
            self.rel.append((R, C, Vals, eptr))

    def __len__(self):
        return len(self.anchors)

    def batch(self, graphs: np.ndarray) -> _Batch:
        graphs = np.asarray(graphs, dtype=np.int64)
        nstart = self.node_ptr[graphs]
        ncount = self.node_ptr[graphs + 1] - nstart
        new_off = np.concatenate([[0], np.cumsum(ncount)[:-1]])
        n = int(ncount.sum())
        node_idx = _ranges(nstart, ncount)
        rr, cc, vv = [], [], []
        n_rel = len(self.rel)
        for r, (R, C, V, eptr) in enumerate(self.rel):
            estart = eptr[graphs]
            ecount = eptr[graphs + 1] - estart
            eidx = _ranges(estart, ecount)
            shift = np.repeat(new_off - nstart, ecount)
            rr.append(R[eidx] + shift)
            cc.append((C[eidx] + shift) * n_rel + r)
            vv.append(V[eidx])
        op = sp.csr_matrix((np.concatenate(vv), (np.concatenate(rr), np.concatenate(cc))), shape=(n, n_rel * n))
        a = self.anchors[graphs]
        return _Batch(op, n_rel, self.h0[node_idx], a[:, 0] + new_off, a[:, 1] + new_off)


def _ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    before = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return np.repeat(starts - before, counts) + np.arange(total)


_ANY = SignalKind.ANY.value


class GnnCandidate(Candidate):
    kind = "graph"
    requires_graph = True

    def __init__(self, name: str, signal: SignalKind, weights: Sequence[np.ndarray], head: np.ndarray,
                 bias: np.ndarray, params: Optional[GnnParams] = None, d_text: int = DEFAULT_TEXT_DIM):
        self.name = name
        self.signal = signal
        self.weights = [np.asarray(w, dtype=float) for w in weights]  # each (R, d, d)
        self.head = np.asarray(head, dtype=float)
        self.bias = np.asarray(bias, dtype=float)
        self.params = params or GnnParams()
        self.d_text = d_text
        self.loss_history: list[float] = []
        self.skipped_rows = 0

    @property
    def relations(self) -> tuple[str, ...]:
        return relations_for(self.signal)

    @property
    def dim(self) -> int:
        return self.head.shape[0] // 2

    @classmethod
    def initialize(cls, name: str, signal: SignalKind, dim: int, params: Optional[GnnParams] = None,
                   d_text: int = DEFAULT_TEXT_DIM) -> "GnnCandidate":
        """Glorot-uniform weights drawn from ``params.seed``; zero head bias."""
        params = params or GnnParams()
        params.validate()
        rng = np.random.default_rng(params.seed)
        n_rel = len(relations_for(signal))
        lim = np.sqrt(6.0 / (2 * dim))
        weights = [rng.uniform(-lim, lim, size=(n_rel, dim, dim)) for _ in range(params.layers)]
        hlim = np.sqrt(6.0 / (2 * dim + N_LABELS))
        head = rng.uniform(-hlim, hlim, size=(2 * dim, N_LABELS))
        return cls(name, signal, weights, head, np.zeros(N_LABELS), params, d_text)

    def _prepare(self, subs, h0s) -> _Prepared:
        for sub, h in zip(subs, h0s):
            if h.shape != (len(sub.nodes), self.dim):
                raise ValueError(f"h0 has shape {h.shape}, expected {(len(sub.nodes), self.dim)}")
        return _Prepared(subs, h0s, self.relations, self.params.zeta, self.params.edge_transform)

    def _act(self, m):
        return np.maximum(m, 0.0) if self.params.activation == "relu" else m

    def _propagate(self, batch: _Batch, H: np.ndarray, W: np.ndarray) -> np.ndarray:
        """``sum_r A_r H W_r`` as one sparse product; operator column ``j*R + r`` meets row j of ``H W_r``."""
        n = H.shape[0]
        R, d, e = W.shape
        return batch.op @ (H @ W.transpose(1, 0, 2).reshape(d, R * e)).reshape(n * R, e)

    def _forward(self, batch: _Batch):
        H = batch.h0
        cache = []
        for W in self.weights:
            M = self._propagate(batch, H, W)
            cache.append((H, M))
            H = self._act(M)
        Z = np.concatenate([H[batch.iq], H[batch.ip]], axis=1)
        return Z @ self.head + self.bias, Z, cache

    def _backward(self, batch: _Batch, Z, cache, dlogits):
        grads_w = [None] * len(self.weights)
        g_head = Z.T @ dlogits
        g_bias = dlogits.sum(axis=0)
        dZ = dlogits @ self.head.T
        d = self.dim
        dH = np.zeros((batch.h0.shape[0], d))
        # one anchor of each kind per graph, so fancy-index updates do not collide
        dH[batch.iq] = dZ[:, :d]
        dH[batch.ip] += dZ[:, d:]
        for k in range(len(self.weights) - 1, -1, -1):
            H, M = cache[k]
            dM = dH * (M > 0) if self.params.activation == "relu" else dH
            W = self.weights[k]
            R, d_in, e = W.shape
            U = (batch.op_t @ dM).reshape(H.shape[0], R * e)  # block r is A_r^T dM
            grads_w[k] = (H.T @ U).reshape(d_in, R, e).transpose(1, 0, 2)
            if k > 0:
                dH = U @ W.transpose(1, 0, 2).reshape(d_in, R * e).T
        return grads_w, g_head, g_bias

    def loss_and_grad(self, subs: Sequence[Subgraph], h0s: Sequence[np.ndarray], labels,
                      class_weights=None) -> tuple[float, dict]:
        """Weighted mean cross-entropy over the given subgraphs and its exact gradient."""
        prep = self._prepare(subs, h0s)
        return self._batch_loss_grad(prep.batch(np.arange(len(prep))), np.asarray(labels, dtype=np.int64),
                                     class_weights)

    def _batch_loss_grad(self, batch: _Batch, y: np.ndarray, class_weights=None):
        cw = np.ones(N_LABELS) if class_weights is None else np.asarray(class_weights, dtype=float)
        w = cw[y]
        logits, Z, cache = self._forward(batch)
        P = softmax(logits)
        rows = np.arange(len(y))
        top = logits.argmax(axis=1)
        shifted = logits - logits[rows, top][:, None]
        # log1p of the non-maximal terms keeps precision when the loss is tiny
        e = np.exp(shifted)
        e[rows, top] = 0.0
        rest = e.sum(axis=1)
        nll = np.log1p(rest) - shifted[rows, y]
        loss = float(np.sum(w * nll) / w.sum())
        dlogits = P.copy()
        dlogits[rows, y] = 0.0
        dlogits[rows, y] = -dlogits.sum(axis=1)  # p_y - 1 without cancellation
        dlogits *= (w / w.sum())[:, None]
        gw, gh, gb = self._backward(batch, Z, cache, dlogits)
        return loss, {"weights": gw, "head": gh, "bias": gb}

    def forward_many(self, subs: Sequence[Subgraph], h0s: Sequence[np.ndarray]) -> np.ndarray:
        if not subs:
            return np.zeros((0, N_LABELS))
        prep = self._prepare(subs, h0s)
        out = []
        for a in range(0, len(prep), PREDICT_BATCH):
            logits, _, _ = self._forward(prep.batch(np.arange(a, min(a + PREDICT_BATCH, len(prep)))))
            out.append(softmax(logits))
        return np.concatenate(out)

    def predict_many(self, inputs: CandidateInputs) -> np.ndarray:
        out = np.full((len(inputs), N_LABELS), np.nan)
        mask = self.available(inputs)
        if not mask.any():
            return out
        if inputs.node_features is None:
            raise CandidateError(f"candidate {self.name!r} needs a node feature table")
        idx = np.flatnonzero(mask)
        subs = [inputs.subgraphs[i] for i in idx]
        h0s = inputs.node_features.featurize_many(subs, [inputs.pairs[i] for i in idx])
        # fixed chunking keeps results independent of how callers split batches
        for a in range(0, len(idx), PREDICT_BATCH):
            sl = slice(a, a + PREDICT_BATCH)
            out[idx[sl]] = self.forward_many(subs[sl], h0s[sl])
        return out

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"W{k}": w for k, w in enumerate(self.weights)}
        arrays["head"] = self.head
        arrays["bias"] = self.bias
        return arrays

    def to_record(self) -> dict:
        hp = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.params).items()}
        return {
            "version": CHECKPOINT_VERSION,
            "name": self.name,
            "kind": self.kind,
            "signal": self.signal.value,
            "hyperparameters": hp,
            "d_text": self.d_text,
            "weights": [array_record(w) for w in self.weights],
            "head": array_record(self.head),
            "bias": array_record(self.bias),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "GnnCandidate":
        hp = dict(rec["hyperparameters"])
        if hp.get("class_weights") is not None:
            hp["class_weights"] = tuple(hp["class_weights"])
        return cls(rec["name"], SignalKind.parse(rec["signal"]), [array_from_record(w) for w in rec["weights"]],
                   array_from_record(rec["head"]), array_from_record(rec["bias"]), GnnParams(**hp),
                   int(rec["d_text"]))


def gnn_forward(model: GnnCandidate, sub: Subgraph, h0: np.ndarray) -> LabelDistribution:
    h0 = np.asarray(h0, dtype=float)
    if h0.ndim != 2 or h0.shape[0] != len(sub.nodes) or h0.shape[1] != model.dim:
        raise ValueError(f"h0 has shape {h0.shape}, expected ({len(sub.nodes)}, {model.dim})")
    iq, ip = sub.anchor_indices
    if not (0 <= iq < len(sub.nodes) and 0 <= ip < len(sub.nodes)):
        raise ValueError("anchor index out of range")
    return LabelDistribution.from_array(model.forward_many([sub], [h0])[0])


def gnn_train(
    name: str,
    inputs: CandidateInputs,
    labels,
    signal: SignalKind,
    params: Optional[GnnParams] = None,
) -> GnnCandidate:
    """Mini-batch gradient descent on the weighted cross-entropy.

    Rows without a subgraph are skipped; their count is kept on the model.
    """
    params = params or GnnParams()
    params.validate()
    table = inputs.node_features
    if table is None:
        raise ValueError("graph candidates need a node feature table")
    y_all = np.asarray(labels, dtype=np.int64)
    subs_all = inputs.subgraphs or [None] * len(inputs)
    keep = [i for i, s in enumerate(subs_all) if s is not None]
    if not keep:
        raise ValueError(f"no training row of {name!r} has a subgraph")
    subs = [subs_all[i] for i in keep]
    h0s = table.featurize_many(subs, [inputs.pairs[i] for i in keep])
    y = y_all[keep]
    model = GnnCandidate.initialize(name, signal, table.dim, params, table.d_text)
    model.skipped_rows = len(inputs) - len(keep)
    prep = model._prepare(subs, h0s)
    rng = np.random.default_rng(params.seed + 1)
    n = len(y)
    history = []
    for _ in range(params.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for a in range(0, n, params.batch_size):
            idx = np.sort(order[a : a + params.batch_size])
            loss, g = model._batch_loss_grad(prep.batch(idx), y[idx], params.class_weights)
            total += loss * len(idx)
            count += len(idx)
            if params.learning_rate == 0:
                continue
            for k in range(len(model.weights)):
                model.weights[k] -= params.learning_rate * (g["weights"][k] + params.l2 * model.weights[k])
            model.head -= params.learning_rate * (g["head"] + params.l2 * model.head)
            model.bias -= params.learning_rate * g["bias"]
        history.append(total / count)
    model.loss_history = history
    return model

