"""Shapley attributions for tree ensembles, grouped per candidate model and relation.

Attributions use interventional semantics: absent features take their
values from a background row, and the result is averaged over the
background set. The fast path walks every root-to-leaf path once per
background row; ``explain_brute_force`` enumerates feature subsets directly
and serves as the reference.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from numba import njit

from .core import N_LABELS, softmax
from .gbdt import LOCALE_GROUP, FeatureSchema, RegressionTree, TreeEnsemble

MAX_BRUTE_FORCE_FEATURES = 12
DEFAULT_BACKGROUND = 100


@dataclass
class Attribution:
    base_value: float
    per_feature: dict[str, float]
    per_group: dict[str, float]
    class_index: int
    output: str = "score"

    @property
    def total(self) -> float:
        return self.base_value + sum(self.per_feature.values())

    def values(self) -> np.ndarray:
        return np.array(list(self.per_feature.values()))


@dataclass
class GlobalImportance:
    shares: dict[str, float]
    mean_abs: dict[str, float] = field(default_factory=dict)

    def ranked(self) -> list[tuple[str, float]]:
        return sorted(self.shares.items(), key=lambda kv: (-kv[1], kv[0]))


# ----------------------------------------------------------------------------
# leaf paths


@dataclass
class _PathTable:
    """All root-to-leaf paths of a set of trees, flattened for the kernel."""

    leaf_value: np.ndarray
    start: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    default_left: np.ndarray
    went_left: np.ndarray


def _path_table(trees: Sequence[RegressionTree], scale: float) -> _PathTable:
    values, starts = [], [0]
    feats, thrs, dls, dirs = [], [], [], []
    for tree in trees:
        stack = [(0, [])]
        while stack:
            node, path = stack.pop()
            if tree.feature[node] < 0:
                values.append(scale * tree.value[node])
                for n, d in path:
                    feats.append(tree.feature[n])
                    thrs.append(tree.threshold[n])
                    dls.append(tree.default_left[n])
                    dirs.append(d)
                starts.append(len(feats))
                continue
            stack.append((tree.right[node], path + [(node, False)]))
            stack.append((tree.left[node], path + [(node, True)]))
    return _PathTable(
        np.array(values, dtype=float),
        np.array(starts, dtype=np.int64),
        np.array(feats, dtype=np.int64),
        np.array(thrs, dtype=float),
        np.array(dls, dtype=np.bool_),
        np.array(dirs, dtype=np.bool_),
    )


@njit(cache=True)
def _goes_left(x, thr, dl):
    if x != x:
        return dl
    return x <= thr


@njit(cache=True)
def _interventional(x, Z, leaf_value, start, feat, thr, dl, went_left, weights_pos, weights_neg, n_features):
    """Sum over background rows of per-feature Shapley values of ``f(x) - f(z)``."""
    phi = np.zeros(n_features)
    state = np.zeros(n_features, dtype=np.int8)  # 0 free, 1 follows x, 2 follows z
    touched = np.empty(64, dtype=np.int64)
    for j in range(Z.shape[0]):
        z = Z[j]
        for leaf in range(leaf_value.shape[0]):
            na = 0
            nb = 0
            nt = 0
            ok = True
            for p in range(start[leaf], start[leaf + 1]):
                f = feat[p]
                xl = _goes_left(x[f], thr[p], dl[p])
                zl = _goes_left(z[f], thr[p], dl[p])
                d = went_left[p]
                if xl == zl:
                    if d != xl:
                        ok = False
                        break
                elif d == xl:
                    if state[f] == 2:
                        ok = False
                        break
                    if state[f] == 0:
                        state[f] = 1
                        na += 1
                        if nt == touched.shape[0]:
                            bigger = np.empty(2 * nt, dtype=np.int64)
                            bigger[:nt] = touched
                            touched = bigger
                        touched[nt] = f
                        nt += 1
                else:
                    if state[f] == 1:
                        ok = False
                        break
                    if state[f] == 0:
                        state[f] = 2
                        nb += 1
                        if nt == touched.shape[0]:
                            bigger = np.empty(2 * nt, dtype=np.int64)
                            bigger[:nt] = touched
                            touched = bigger
                        touched[nt] = f
                        nt += 1
            if ok and nt > 0:
                v = leaf_value[leaf]
                for t in range(nt):
                    f = touched[t]
                    if state[f] == 1:
                        phi[f] += v * weights_pos[na, nb]
                    else:
                        phi[f] -= v * weights_neg[na, nb]
            for t in range(nt):
                state[touched[t]] = 0
    return phi


def _weight_tables(max_depth: int):
    """``pos[a, b] = (a-1)! b! / (a+b)!`` and ``neg[a, b] = a! (b-1)! / (a+b)!``."""
    size = max_depth + 2
    pos = np.zeros((size, size))
    neg = np.zeros((size, size))
    for a in range(size):
        for b in range(size):
            if a + b == 0:
                continue
            denom = math.lgamma(a + b + 1)
            if a >= 1:
                pos[a, b] = math.exp(math.lgamma(a) + math.lgamma(b + 1) - denom)
            if b >= 1:
                neg[a, b] = math.exp(math.lgamma(a + 1) + math.lgamma(b) - denom)
    return pos, neg


class _ClassExplainer:
    def __init__(self, ensemble: TreeEnsemble, class_index: int):
        trees = ensemble.class_trees(class_index)
        self.table = _path_table(trees, ensemble.learning_rate)
        depth = max([t.depth() for t in trees], default=0)
        self.pos, self.neg = _weight_tables(max(depth, 1))
        self.n_features = ensemble.n_features

    def phi(self, x: np.ndarray, Z: np.ndarray) -> np.ndarray:
        t = self.table
        if len(t.leaf_value) == 0:
            return np.zeros(self.n_features)
        total = _interventional(
            np.ascontiguousarray(x, dtype=float), np.ascontiguousarray(Z, dtype=float),
            t.leaf_value, t.start, t.feature, t.threshold, t.default_left, t.went_left,
            self.pos, self.neg, self.n_features,
        )
        return total / len(Z)


def _check_inputs(ensemble: TreeEnsemble, row, background):
    row = np.asarray(row, dtype=float)
    background = np.atleast_2d(np.asarray(background, dtype=float))
    if row.ndim != 1 or row.shape[0] != ensemble.n_features:
        raise ValueError(f"row must have {ensemble.n_features} features")
    if background.shape[1] != ensemble.n_features:
        raise ValueError(f"background rows must have {ensemble.n_features} features")
    if len(background) == 0:
        raise ValueError("background set is empty")
    return row, background


def _group_sums(schema: FeatureSchema, phi: np.ndarray) -> dict[str, float]:
    return {g: float(phi[idx].sum()) for g, idx in schema.groups().items()}


def _make_attribution(ensemble, phi, base, class_index, output) -> Attribution:
    schema = ensemble.schema
    return Attribution(
        float(base),
        {name: float(v) for name, v in zip(schema.names, phi)},
        _group_sums(schema, phi),
        int(class_index),
        output,
    )


def explain(
    ensemble: TreeEnsemble,
    row,
    background,
    class_index: Optional[int] = None,
) -> Attribution:
    """Per-feature attributions of one row's pre-softmax score.

    ``class_index`` defaults to the predicted class. ``base_value`` is the
    mean background score, so ``base_value + sum(per_feature)`` reproduces
    the row's score.
    """
    row, background = _check_inputs(ensemble, row, background)
    if class_index is None:
        class_index = int(np.argmax(ensemble.raw_scores(row)[0]))
    base = float(ensemble.raw_scores(background)[:, class_index].mean())
    phi = _ClassExplainer(ensemble, class_index).phi(row, background)
    return _make_attribution(ensemble, phi, base, class_index, "score")


def _model_output(ensemble: TreeEnsemble, X: np.ndarray, class_index: int, output: str) -> np.ndarray:
    scores = ensemble.raw_scores(X)
    if output == "score":
        return scores[:, class_index]
    if output == "probability":
        return softmax(scores)[:, class_index]
    raise ValueError(f"unknown output {output!r}")


def explain_brute_force(
    ensemble: TreeEnsemble,
    row,
    background,
    class_index: Optional[int] = None,
    output: str = "score",
    max_features: int = MAX_BRUTE_FORCE_FEATURES,
) -> Attribution:
    """Exact Shapley values by enumerating every feature subset.

    The value of a coalition is the model output with coalition features
    taken from ``row`` and the rest from each background row, averaged.
    ``output="probability"`` explains the softmax probability instead of
    the score.
    """
    row, background = _check_inputs(ensemble, row, background)
    n = ensemble.n_features
    if n > max_features:
        raise ValueError(f"{n} features exceeds the brute-force limit of {max_features}")
    if class_index is None:
        class_index = int(np.argmax(ensemble.raw_scores(row)[0]))
    m = len(background)
    masks = np.array(list(itertools.product([False, True], repeat=n)), dtype=bool)[:, ::-1]
    hybrid = np.where(masks[:, None, :], row[None, None, :], background[None, :, :]).reshape(-1, n)
    values = _model_output(ensemble, hybrid, class_index, output).reshape(len(masks), m).mean(axis=1)
    index_of = {tuple(mk): i for i, mk in enumerate(masks.tolist())}
    fact = [math.factorial(k) for k in range(n + 1)]
    phi = np.zeros(n)
    for i in range(n):
        for mk, v_without in zip(masks.tolist(), values):
            if mk[i]:
                continue
            size = sum(mk)
            with_i = list(mk)
            with_i[i] = True
            weight = fact[size] * fact[n - size - 1] / fact[n]
            phi[i] += weight * (values[index_of[tuple(with_i)]] - v_without)
    base = float(values[0])
    return _make_attribution(ensemble, phi, base, class_index, output)


def explain_rows(ensemble: TreeEnsemble, X, background, class_index: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Attributions for many rows at once.

    Returns ``(phi, classes)``: an ``(n_rows, n_features)`` array and the
    class explained for each row (the predicted class unless given).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    background = np.atleast_2d(np.asarray(background, dtype=float))
    if class_index is None:
        classes = np.argmax(ensemble.raw_scores(X), axis=1)
    else:
        classes = np.full(len(X), class_index)
    explainers = {}
    phi = np.zeros((len(X), ensemble.n_features))
    for r in range(len(X)):
        c = int(classes[r])
        if c not in explainers:
            explainers[c] = _ClassExplainer(ensemble, c)
        phi[r] = explainers[c].phi(X[r], background)
    return phi, classes


def sample_background(X, size: int = DEFAULT_BACKGROUND, seed: int = 0) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if len(X) <= size:
        return X.copy()
    rng = np.random.default_rng(seed)
    return X[np.sort(rng.choice(len(X), size=size, replace=False))]


def global_importance(
    ensemble: TreeEnsemble,
    rows,
    background=None,
    groups: Optional[Mapping[str, Sequence[int]]] = None,
    seed: int = 0,
) -> GlobalImportance:
    """Share of mean absolute group attribution per feature group.

    Each row's group attribution is the sum of its columns' values for the
    row's predicted class. Shares sum to 1; an ensemble that never splits
    spreads the shares evenly.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if len(rows) == 0:
        raise ValueError("need at least one evaluation row")
    if background is None:
        background = sample_background(rows, DEFAULT_BACKGROUND, seed)
    groups = dict(ensemble.schema.groups() if groups is None else groups)
    phi, _ = explain_rows(ensemble, rows, background)
    mean_abs = {g: float(np.mean(np.abs(phi[:, list(idx)].sum(axis=1)))) for g, idx in groups.items()}
    total = sum(mean_abs.values())
    if total > 0:
        shares = {g: v / total for g, v in mean_abs.items()}
    else:
        shares = {g: 1.0 / len(mean_abs) for g in mean_abs}
    return GlobalImportance(shares, mean_abs)


def relation_shares(importance: GlobalImportance, candidate_relation: Mapping[str, str]) -> dict[str, float]:
    """Renormalize graph-candidate shares by the relation each candidate uses."""
    totals: dict[str, float] = {}
    for name, relation in candidate_relation.items():
        totals[relation] = totals.get(relation, 0.0) + importance.mean_abs.get(name, 0.0)
    s = sum(totals.values())
    if s <= 0:
        return {r: (1.0 / len(totals) if totals else 0.0) for r in totals}
    return {r: v / s for r, v in totals.items()}


def model_shares(importance: GlobalImportance) -> dict[str, float]:
    """Shares over candidate groups only, excluding the locale columns."""
    models = {g: v for g, v in importance.mean_abs.items() if g != LOCALE_GROUP}
    s = sum(models.values())
    if s <= 0:
        return {g: 1.0 / len(models) for g in models} if models else {}
    return {g: v / s for g, v in models.items()}


def write_report(path, models: Mapping[str, float], relations: Mapping[str, float]) -> None:
    """Two tab-separated tables: model contributions, then relation contributions."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["table", "name", "share"])
        for name, share in sorted(models.items(), key=lambda kv: (-kv[1], kv[0])):
            w.writerow(["model", name, f"{share:.6f}"])
        for name, share in sorted(relations.items(), key=lambda kv: (-kv[1], kv[0])):
            w.writerow(["relation", name, f"{share:.6f}"])
