"""Bag-of-words linear-softmax candidate over the assembled query/product sequence."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from ..core import N_LABELS, softmax
from ..denoiser import TokenSeq
from .base import CHECKPOINT_VERSION, Candidate, CandidateInputs, array_from_record, array_record


@dataclass
class SemanticParams:
    learning_rate: float = 0.5
    epochs: int = 200
    batch_size: Optional[int] = None  # None = full batch
    l2: float = 0.0
    min_count: int = 1
    class_weights: Optional[tuple[float, ...]] = None
    seed: int = 0


def text_features(seq: TokenSeq) -> list[str]:
    """Query tokens, product tokens, tokens shared by both, and an overlap bucket."""
    q = set(seq.query_tokens)
    p = set(seq.product_tokens)
    shared = q & p
    feats = [f"q:{t}" for t in sorted(q)]
    feats += [f"p:{t}" for t in sorted(p)]
    feats += [f"m:{t}" for t in sorted(shared)]
    feats.append(f"ov:{min(len(shared), 3)}")
    return feats


class SemanticCandidate(Candidate):
    """Softmax over a linear map of L2-normalized binary text features plus a locale one-hot.

    Each row's text block has unit norm and the locale block at most one
    active entry, so with the bias the squared feature norm is at most 3 and
    full-batch gradient descent on the weighted cross-entropy decreases the
    loss for any learning rate below 4/3.
    """

    kind = "semantic"
    requires_graph = False

    def __init__(self, name: str, vocab: dict[str, int], locales: Sequence[str],
                 weights: np.ndarray, bias: np.ndarray, params: Optional[SemanticParams] = None):
        self.name = name
        self.vocab = dict(vocab)
        self.locales = list(locales)
        self.weights = np.asarray(weights, dtype=float)
        self.bias = np.asarray(bias, dtype=float)
        self.params = params or SemanticParams()
        self.loss_history: list[float] = []

    @classmethod
    def zeros(cls, name: str, vocab: dict[str, int], locales: Sequence[str]) -> "SemanticCandidate":
        dim = len(vocab) + len(locales)
        return cls(name, vocab, locales, np.zeros((dim, N_LABELS)), np.zeros(N_LABELS))

    def design(self, tokens: Sequence[TokenSeq], locales: Sequence[str]) -> sp.csr_matrix:
        loc_index = {loc: i for i, loc in enumerate(self.locales)}
        V = len(self.vocab)
        rows, cols, vals = [], [], []
        for r, (seq, loc) in enumerate(zip(tokens, locales)):
            idx = sorted({self.vocab[f] for f in text_features(seq) if f in self.vocab})
            if idx:
                v = 1.0 / np.sqrt(len(idx))
                rows += [r] * len(idx)
                cols += idx
                vals += [v] * len(idx)
            li = loc_index.get(loc)
            if li is not None:
                rows.append(r)
                cols.append(V + li)
                vals.append(1.0)
        return sp.csr_matrix((vals, (rows, cols)), shape=(len(tokens), V + len(self.locales)))

    def scores(self, X: sp.csr_matrix) -> np.ndarray:
        return np.asarray(X @ self.weights) + self.bias

    def predict_many(self, inputs: CandidateInputs) -> np.ndarray:
        X = self.design(inputs.tokens, [p.locale for p in inputs.pairs])
        return softmax(self.scores(X))

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias}

    def to_record(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "name": self.name,
            "kind": self.kind,
            "hyperparameters": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.params).items()},
            "vocab": sorted(self.vocab, key=self.vocab.__getitem__),
            "locales": self.locales,
            "weights": array_record(self.weights),
            "bias": array_record(self.bias),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SemanticCandidate":
        hp = dict(rec["hyperparameters"])
        if hp.get("class_weights") is not None:
            hp["class_weights"] = tuple(hp["class_weights"])
        vocab = {t: i for i, t in enumerate(rec["vocab"])}
        return cls(rec["name"], vocab, rec["locales"], array_from_record(rec["weights"]),
                   array_from_record(rec["bias"]), SemanticParams(**hp))


def _weighted_ce(P: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    p = np.clip(P[np.arange(len(y)), y], 1e-300, None)
    return float(np.sum(w * -np.log(p)) / np.sum(w))


def semantic_train(
    name: str,
    inputs: CandidateInputs,
    labels,
    params: Optional[SemanticParams] = None,
) -> SemanticCandidate:
    params = params or SemanticParams()
    y = np.asarray(labels, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("empty training set")
    if len(y) != len(inputs):
        raise ValueError("labels and inputs differ in length")
    counts: dict[str, int] = {}
    for seq in inputs.tokens:
        for f in text_features(seq):
            counts[f] = counts.get(f, 0) + 1
    kept = sorted(f for f, c in counts.items() if c >= params.min_count)
    vocab = {f: i for i, f in enumerate(kept)}
    locales = sorted({p.locale for p in inputs.pairs})
    model = SemanticCandidate.zeros(name, vocab, locales)
    model.params = params
    X = model.design(inputs.tokens, [p.locale for p in inputs.pairs])
    cw = np.ones(N_LABELS) if params.class_weights is None else np.asarray(params.class_weights, float)
    w = cw[y]
    Y = np.eye(N_LABELS)[y]
    rng = np.random.default_rng(params.seed)
    n = len(y)
    batch = n if params.batch_size is None else max(1, int(params.batch_size))
    history = []
    for _ in range(params.epochs):
        order = np.arange(n) if batch >= n else rng.permutation(n)
        for a in range(0, n, batch):
            idx = order[a : a + batch]
            Xb, wb = X[idx], w[idx]
            P = softmax(model.scores(Xb))
            G = (P - Y[idx]) * (wb / wb.sum())[:, None]
            grad_w = np.asarray(Xb.T @ G) + params.l2 * model.weights
            grad_b = G.sum(axis=0)
            model.weights -= params.learning_rate * grad_w
            model.bias -= params.learning_rate * grad_b
        history.append(_weighted_ce(softmax(model.scores(X)), y, w))
    model.loss_history = history
    return model
