"""Multi-class gradient-boosted regression trees over candidate probability columns.

One regression tree per class per iteration, fitted leaf-wise with exact
greedy splits on the gradient/hessian of the class-weighted softmax
cross-entropy. Scores accumulate stagewise with shrinkage; probabilities are
the softmax of the four class scores.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from numba import njit

from .core import N_LABELS, LABEL_WORDS, DataError, LabelDistribution, QueryProductPair, softmax

CHECKPOINT_VERSION = "esci-gbdt v1"
LOCALE_GROUP = "locale"
GAIN_TIE_TOL = 1e-9


# ----------------------------------------------------------------------------
# feature schema


@dataclass(frozen=True)
class FeatureColumn:
    name: str
    group: str
    class_index: Optional[int] = None


@dataclass(frozen=True)
class FeatureSchema:
    columns: tuple[FeatureColumn, ...]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")

    @classmethod
    def build(cls, candidate_names: Sequence[str], locales: Sequence[str]) -> "FeatureSchema":
        cols = []
        for name in candidate_names:
            for c, word in enumerate(LABEL_WORDS):
                cols.append(FeatureColumn(f"{name}:{word}", name, c))
        for loc in locales:
            cols.append(FeatureColumn(f"{LOCALE_GROUP}:{loc}", LOCALE_GROUP))
        return cls(tuple(cols))

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def candidates(self) -> list[str]:
        return list(dict.fromkeys(c.group for c in self.columns if c.group != LOCALE_GROUP))

    @property
    def locales(self) -> list[str]:
        return [c.name.split(":", 1)[1] for c in self.columns if c.group == LOCALE_GROUP]

    def groups(self) -> dict[str, list[int]]:
        """Map each group (candidate name or ``"locale"``) to its column indices."""
        out: dict[str, list[int]] = {}
        for i, c in enumerate(self.columns):
            out.setdefault(c.group, []).append(i)
        return out

    def __len__(self):
        return len(self.columns)

    def to_record(self) -> list:
        return [[c.name, c.group, c.class_index] for c in self.columns]

    @classmethod
    def from_record(cls, record) -> "FeatureSchema":
        return cls(tuple(FeatureColumn(n, g, ci) for n, g, ci in record))


def build_features(
    pairs: Sequence[QueryProductPair],
    predictions: Mapping[str, np.ndarray],
    candidate_names: Sequence[str],
    locales: Sequence[str],
) -> tuple[np.ndarray, FeatureSchema]:
    """Concatenate candidate probability vectors and the locale one-hot.

    ``predictions[name]`` is an ``(n_pairs, 4)`` array; NaN rows mark a
    missing prediction and stay NaN in the feature matrix. A registered
    candidate absent from ``predictions`` gets all-missing columns.
    """
    unknown = set(predictions) - set(candidate_names)
    if unknown:
        raise ValueError(f"predictions for unregistered candidates: {sorted(unknown)}")
    schema = FeatureSchema.build(candidate_names, locales)
    n = len(pairs)
    X = np.full((n, len(schema)), np.nan)
    for j, name in enumerate(candidate_names):
        if name not in predictions:
            continue
        block = np.asarray(predictions[name], dtype=float)
        if block.shape != (n, N_LABELS):
            raise ValueError(f"predictions for {name!r} have shape {block.shape}, expected {(n, N_LABELS)}")
        X[:, 4 * j : 4 * j + 4] = block
    base = 4 * len(candidate_names)
    loc_index = {loc: i for i, loc in enumerate(locales)}
    X[:, base:] = 0.0
    for r, pair in enumerate(pairs):
        i = loc_index.get(pair.locale)
        if i is not None:
            X[r, base + i] = 1.0
    return X, schema


# ----------------------------------------------------------------------------
# parameters and trees


@dataclass
class GbdtParams:
    iterations: int = 1500
    learning_rate: float = 0.005
    num_leaves: int = 15
    max_depth: int = 15
    bagging_freq: int = 200
    bagging_fraction: float = 1.0
    min_data_in_leaf: int = 5
    min_sum_hessian: float = 1e-3
    lambda_l2: float = 1.0
    min_gain: float = 0.0
    class_weights: Optional[tuple[float, ...]] = None
    seed: int = 0

    def validate(self) -> None:
        if self.iterations < 1 or self.num_leaves < 2 or self.max_depth < 1:
            raise ValueError("iterations, num_leaves and max_depth must be positive")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must be in (0, 1]")
        if not 0 < self.bagging_fraction <= 1:
            raise ValueError("bagging_fraction must be in (0, 1]")
        if self.min_data_in_leaf < 1 or self.lambda_l2 < 0:
            raise ValueError("min_data_in_leaf must be >= 1 and lambda_l2 >= 0")
        if self.class_weights is not None:
            if len(self.class_weights) != N_LABELS or min(self.class_weights) <= 0:
                raise ValueError("class_weights must be 4 positive numbers")

    @property
    def bagging(self) -> bool:
        return self.bagging_freq > 0 and self.bagging_fraction < 1.0


@dataclass
class RegressionTree:
    """Flat node arrays; ``feature == -1`` marks a leaf. Node 0 is the root."""

    feature: np.ndarray
    threshold: np.ndarray
    default_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.nonzero(active)[0]
            nd = node[idx]
            x = X[idx, self.feature[nd]]
            go_left = np.where(np.isnan(x), self.default_left[nd], x <= self.threshold[nd])
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return self.value[node]

    def to_record(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "default_left": self.default_left.astype(int).tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "cover": self.cover.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "RegressionTree":
        return cls(
            np.array(rec["feature"], dtype=np.int64),
            np.array(rec["threshold"], dtype=float),
            np.array(rec["default_left"], dtype=bool),
            np.array(rec["left"], dtype=np.int64),
            np.array(rec["right"], dtype=np.int64),
            np.array(rec["value"], dtype=float),
            np.array(rec["cover"], dtype=float),
        )

    @classmethod
    def leaf(cls, value: float, cover: float = 1.0) -> "RegressionTree":
        return cls(
            np.array([-1]), np.array([0.0]), np.array([True]), np.array([-1]),
            np.array([-1]), np.array([float(value)]), np.array([float(cover)]),
        )


@dataclass
class TreeEnsemble:
    trees: list[list[RegressionTree]]  # trees[iteration][class]
    learning_rate: float
    base_scores: np.ndarray
    class_weights: np.ndarray
    schema: FeatureSchema
    params: dict = field(default_factory=dict)
    loss_history: list[float] = field(default_factory=list)

    @property
    def n_iterations(self) -> int:
        return len(self.trees)

    @property
    def n_features(self) -> int:
        return len(self.schema)

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"row has {X.shape[1]} features, schema expects {self.n_features}")
        return X

    def raw_scores(self, X: np.ndarray, mode: str = "sum") -> np.ndarray:
        """Pre-softmax class scores.

        ``mode="sum"`` is the boosted form ``base + lr * sum(trees)``;
        ``mode="mean"`` averages tree outputs over iterations instead.
        """
        X = self._check(X)
        total = np.zeros((len(X), N_LABELS))
        for per_class in self.trees:
            for c, tree in enumerate(per_class):
                total[:, c] += tree.predict(X)
        if mode == "sum":
            scale = self.learning_rate
        elif mode == "mean":
            scale = 1.0 / max(self.n_iterations, 1)
        else:
            raise ValueError(f"unknown prediction mode {mode!r}")
        return self.base_scores[None, :] + scale * total

    def predict_proba(self, X: np.ndarray, mode: str = "sum") -> np.ndarray:
        return softmax(self.raw_scores(X, mode))

    def predict(self, row: np.ndarray, mode: str = "sum") -> LabelDistribution:
        row = np.asarray(row, dtype=float)
        if row.ndim != 1:
            raise ValueError("predict takes a single row; use predict_proba for batches")
        return LabelDistribution.from_array(self.predict_proba(row, mode)[0])

    def truncated(self, n_iterations: int) -> "TreeEnsemble":
        return TreeEnsemble(
            self.trees[:n_iterations], self.learning_rate, self.base_scores.copy(),
            self.class_weights.copy(), self.schema, dict(self.params), self.loss_history[:n_iterations],
        )

    def class_trees(self, c: int) -> list[RegressionTree]:
        return [per_class[c] for per_class in self.trees]

    def to_record(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "schema": self.schema.to_record(),
            "params": self.params,
            "learning_rate": self.learning_rate,
            "base_scores": self.base_scores.tolist(),
            "class_weights": self.class_weights.tolist(),
            "loss_history": list(self.loss_history),
            "trees": [[t.to_record() for t in per_class] for per_class in self.trees],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_record(cls, rec: dict) -> "TreeEnsemble":
        if rec.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported ensemble checkpoint version {rec.get('version')!r}")
        return cls(
            [[RegressionTree.from_record(t) for t in per_class] for per_class in rec["trees"]],
            float(rec["learning_rate"]),
            np.array(rec["base_scores"], dtype=float),
            np.array(rec["class_weights"], dtype=float),
            FeatureSchema.from_record(rec["schema"]),
            dict(rec["params"]),
            list(rec["loss_history"]),
        )

    @classmethod
    def load(cls, path) -> "TreeEnsemble":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"ensemble checkpoint not found: {path}")
        return cls.from_record(json.loads(path.read_text(encoding="utf-8")))


# ----------------------------------------------------------------------------
# losses


def loss(labels, probs, class_weights=None) -> float:
    """Class-weighted one-vs-rest cross-entropy, summed over classes, averaged over rows."""
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.clip(np.asarray(probs, dtype=float), 1e-12, 1 - 1e-12)
    if len(labels) != len(probs):
        raise ValueError("labels and predictions differ in length")
    if len(labels) == 0:
        return 0.0
    w = np.ones(N_LABELS) if class_weights is None else np.asarray(class_weights, dtype=float)
    onehot = np.eye(N_LABELS)[labels]
    per_row = -(onehot * np.log(probs) + (1 - onehot) * np.log(1 - probs)).sum(axis=1)
    return float(np.sum(w[labels] * per_row) / len(labels))


def softmax_cross_entropy(labels, probs, class_weights=None) -> float:
    """Weighted multinomial cross-entropy, the objective the booster descends."""
    labels = np.asarray(labels, dtype=np.int64)
    p = np.clip(np.asarray(probs, dtype=float)[np.arange(len(labels)), labels], 1e-300, None)
    w = np.ones(N_LABELS) if class_weights is None else np.asarray(class_weights, dtype=float)
    wi = w[labels]
    return float(np.sum(wi * -np.log(p)) / np.sum(wi))


def balanced_class_weights(labels, n_classes: int = N_LABELS) -> tuple[float, ...]:
    """``n / (classes_present * count_c)``; absent classes get weight 1."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    present = counts > 0
    w = np.ones(n_classes)
    w[present] = len(labels) / (present.sum() * counts[present])
    return tuple(float(x) for x in w)


# ----------------------------------------------------------------------------
# split search


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    gain: float
    default_left: bool


@njit(cache=True)
def _leaf_obj(G, H, lam):
    return G * G / (H + lam)


@njit(cache=True)
def _scan_segment(Xs, order, start, end, g, h, lam, min_data, min_hess, only_f, target, tol):
    """Scan one leaf's segment ``[start, end)`` of every feature's sorted rows.

    Missing (NaN) rows sit at the tail of each feature's segment and follow
    the side holding more present rows (left on ties). Returns node totals
    and, per feature, the best gain, threshold and default direction. With
    ``only_f >= 0`` only that feature is scanned and the first threshold
    whose gain reaches ``target - tol`` is reported.
    """
    F = Xs.shape[0]
    G = 0.0
    H = 0.0
    for k in range(start, end):
        r = order[0, k]
        G += g[r]
        H += h[r]
    N = end - start
    parent = _leaf_obj(G, H, lam)
    best_gain = np.full(F, -np.inf)
    best_thr = np.zeros(F)
    best_dl = np.ones(F, dtype=np.bool_)
    f_lo, f_hi = 0, F
    if only_f >= 0:
        f_lo, f_hi = only_f, only_f + 1
    for f in range(f_lo, f_hi):
        stop = end
        Gm = 0.0
        Hm = 0.0
        while stop > start and Xs[f, stop - 1] != Xs[f, stop - 1]:
            stop -= 1
            r = order[f, stop]
            Gm += g[r]
            Hm += h[r]
        Np = stop - start
        Nm = N - Np
        Gp = G - Gm
        Hp = H - Hm
        GL = 0.0
        HL = 0.0
        NL = 0
        for k in range(start, stop):
            x = Xs[f, k]
            if NL > 0 and x > Xs[f, k - 1]:
                NR = Np - NL
                dl = NL >= NR
                gl, hl, nl = GL, HL, NL
                gr, hr, nr = Gp - GL, Hp - HL, NR
                if dl:
                    gl += Gm
                    hl += Hm
                    nl += Nm
                else:
                    gr += Gm
                    hr += Hm
                    nr += Nm
                if nl >= min_data and nr >= min_data and hl >= min_hess and hr >= min_hess:
                    gain = _leaf_obj(gl, hl, lam) + _leaf_obj(gr, hr, lam) - parent
                    prev = Xs[f, k - 1]
                    thr = 0.5 * (prev + x)
                    if not (thr < x):
                        thr = prev
                    if only_f >= 0:
                        if gain >= target - tol:
                            best_gain[f] = gain
                            best_thr[f] = thr
                            best_dl[f] = dl
                            break
                    elif gain > best_gain[f]:
                        best_gain[f] = gain
                        best_thr[f] = thr
                        best_dl[f] = dl
            r = order[f, k]
            GL += g[r]
            HL += h[r]
            NL += 1
    return G, H, N, best_gain, best_thr, best_dl


@njit(cache=True)
def _partition(Xs, order, start, end, go_left, buf_x, buf_r):
    """Stable-partition every feature's segment into left rows then right rows."""
    F = Xs.shape[0]
    n_left = 0
    for f in range(F):
        a = start
        b = 0
        for k in range(start, end):
            r = order[f, k]
            if go_left[r]:
                order[f, a] = r
                Xs[f, a] = Xs[f, k]
                a += 1
            else:
                buf_r[b] = r
                buf_x[b] = Xs[f, k]
                b += 1
        for j in range(b):
            order[f, a + j] = buf_r[j]
            Xs[f, a + j] = buf_x[j]
        n_left = a - start
    return n_left


def _best_in_segment(Xs, order, start, end, g, h, params: GbdtParams):
    """(feature, threshold, gain, default_left, G, H, N) for one leaf segment."""
    args = (params.lambda_l2, params.min_data_in_leaf, params.min_sum_hessian)
    G, H, N, gains, _, _ = _scan_segment(Xs, order, start, end, g, h, *args, -1, 0.0, 0.0)
    best = gains.max() if gains.size else -np.inf
    if not np.isfinite(best):
        return -1, 0.0, -np.inf, True, G, H, N
    tol = GAIN_TIE_TOL * max(1.0, abs(best))
    f = int(np.nonzero(gains >= best - tol)[0][0])
    # earliest threshold of feature f inside the tie band
    _, _, _, g1, t1, d1 = _scan_segment(Xs, order, start, end, g, h, *args, f, best, tol)
    return f, float(t1[f]), float(g1[f]), bool(d1[f]), G, H, N


class _Presorted:
    """Per-feature sorted row order (NaN last) and the matching sorted values."""

    def __init__(self, X: np.ndarray):
        self.order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)
        self.values = np.ascontiguousarray(np.take_along_axis(X.T, self.order, axis=1))

    def restricted(self, rows: np.ndarray):
        """Copies of order/values keeping only ``rows``, sorted order preserved."""
        if len(rows) == self.order.shape[1]:
            return self.order.copy(), self.values.copy()
        keep = np.zeros(self.order.shape[1], dtype=bool)
        keep[rows] = True
        mask = keep[self.order]
        m = len(rows)
        order = self.order[mask].reshape(self.order.shape[0], m)
        values = self.values[mask].reshape(self.order.shape[0], m)
        return np.ascontiguousarray(order), np.ascontiguousarray(values)


def find_best_split(X, g, h, rows=None, params: Optional[GbdtParams] = None) -> Optional[Split]:
    """Best exact split of ``rows`` (default: all) by gradient/hessian gain.

    Ties within a relative 1e-9 of the best gain go to the lowest feature
    index, then the lowest threshold. Returns ``None`` if no valid split.
    """
    params = params or GbdtParams()
    X = np.asarray(X, dtype=float)
    rows = np.arange(len(X)) if rows is None else np.sort(np.asarray(rows))
    order, values = _Presorted(X).restricted(rows)
    g = np.ascontiguousarray(g, dtype=float)
    h = np.ascontiguousarray(h, dtype=float)
    f, thr, gain, dl, *_ = _best_in_segment(values, order, 0, len(rows), g, h, params)
    if f < 0:
        return None
    return Split(f, thr, gain, dl)


def grow_tree(X, g, h, rows, params: GbdtParams, presorted: Optional[_Presorted] = None):
    """Leaf-wise growth: repeatedly split the open leaf with the largest gain.

    Returns the tree and, for inspection, ``(node, member rows)`` for every
    internal node at the moment it was split.
    """
    X = np.asarray(X, dtype=float)
    rows = np.sort(np.asarray(rows))
    pre = presorted or _Presorted(X)
    order, Xs = pre.restricted(rows)
    g = np.ascontiguousarray(g, dtype=float)
    h = np.ascontiguousarray(h, dtype=float)
    lam = params.lambda_l2
    buf_x = np.empty(len(rows))
    buf_r = np.empty(len(rows), dtype=order.dtype)
    go_left = np.zeros(len(X), dtype=np.bool_)

    feature, threshold, default_left = [-1], [0.0], [True]
    left, right, value, cover, depth = [-1], [-1], [0.0], [0.0], [0]
    segment = {0: (0, len(rows))}
    pending = {}  # leaf -> (gain, feature, threshold, default_left)

    def evaluate(leaf):
        a, b = segment[leaf]
        f, thr, gain, dl, G, H, N = _best_in_segment(Xs, order, a, b, g, h, params)
        cover[leaf] = float(N)
        value[leaf] = -G / (H + lam)
        if f >= 0 and gain > params.min_gain and depth[leaf] < params.max_depth:
            pending[leaf] = (gain, f, thr, dl)

    evaluate(0)
    split_log = []
    n_leaves = 1
    while pending and n_leaves < params.num_leaves:
        leaf = max(pending, key=lambda k: (pending[k][0], -k))
        gain, f, thr, dl = pending.pop(leaf)
        a, b = segment.pop(leaf)
        members = np.sort(order[0, a:b])
        split_log.append((leaf, members))
        x = X[members, f]
        go_left[members] = np.where(np.isnan(x), dl, x <= thr)
        n_left = _partition(Xs, order, a, b, go_left, buf_x, buf_r)
        lid, rid = len(feature), len(feature) + 1
        for _ in range(2):
            feature.append(-1)
            threshold.append(0.0)
            default_left.append(True)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            cover.append(0.0)
            depth.append(depth[leaf] + 1)
        feature[leaf], threshold[leaf], default_left[leaf] = f, thr, dl
        left[leaf], right[leaf] = lid, rid
        segment[lid] = (a, a + n_left)
        segment[rid] = (a + n_left, b)
        n_leaves += 1
        evaluate(lid)
        evaluate(rid)
    tree = RegressionTree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=float),
        np.array(default_left, dtype=bool),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=float),
        np.array(cover, dtype=float),
    )
    return tree, split_log


# ----------------------------------------------------------------------------
# training


def train(X, labels, params: Optional[GbdtParams] = None, schema: Optional[FeatureSchema] = None) -> TreeEnsemble:
    params = params or GbdtParams()
    params.validate()
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be 2-D with one row per label")
    if np.isinf(X).any():
        raise ValueError("features must be finite (NaN marks missing)")
    if len(np.unique(y)) < 2:
        raise ValueError("training needs at least two distinct labels")
    if schema is None:
        schema = FeatureSchema(tuple(FeatureColumn(f"f{i}", f"f{i}") for i in range(X.shape[1])))
    elif len(schema) != X.shape[1]:
        raise ValueError("schema length does not match feature count")

    cw = np.ones(N_LABELS) if params.class_weights is None else np.asarray(params.class_weights, float)
    w = cw[y]
    Y = np.eye(N_LABELS)[y]
    pre = _Presorted(X)
    rng = np.random.default_rng(params.seed)
    n = len(X)
    scores = np.zeros((n, N_LABELS))
    base = np.zeros(N_LABELS)
    hess_factor = N_LABELS / (N_LABELS - 1.0)
    rows = np.arange(n)
    trees: list[list[RegressionTree]] = []
    history: list[float] = []
    for it in range(params.iterations):
        if params.bagging and it % params.bagging_freq == 0:
            k = max(1, int(round(params.bagging_fraction * n)))
            rows = np.sort(rng.choice(n, size=k, replace=False))
        P = softmax(scores)
        per_class = []
        for c in range(N_LABELS):
            g = w * (P[:, c] - Y[:, c])
            h = np.maximum(w * hess_factor * P[:, c] * (1.0 - P[:, c]), 1e-16)
            tree, _ = grow_tree(X, g, h, rows, params, pre)
            per_class.append(tree)
        for c, tree in enumerate(per_class):
            scores[:, c] += params.learning_rate * tree.predict(X)
        trees.append(per_class)
        history.append(softmax_cross_entropy(y, softmax(scores), cw))
    return TreeEnsemble(trees, params.learning_rate, base, cw, schema, _params_record(params), history)


def _params_record(params: GbdtParams) -> dict:
    rec = asdict(params)
    if rec["class_weights"] is not None:
        rec["class_weights"] = list(rec["class_weights"])
    return rec


def params_from_record(rec: Mapping) -> GbdtParams:
    rec = dict(rec)
    if rec.get("class_weights") is not None and not isinstance(rec["class_weights"], str):
        rec["class_weights"] = tuple(float(x) for x in rec["class_weights"])
    return GbdtParams(**rec)
