"""Accuracy, macro-F1 and support-weighted F1, plus model comparison tables."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import N_LABELS, EsciLabel

METRICS = ("accuracy", "macro_f1", "weighted_f1")


@dataclass(frozen=True)
class ClassScore:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    macro_f1: float
    weighted_f1: float
    per_class: dict  # label word -> ClassScore
    n: int

    def metric(self, name: str) -> float:
        if name not in METRICS:
            raise ValueError(f"unknown metric {name!r}; choose from {METRICS}")
        return getattr(self, name)

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["per_class"] = {k: asdict(v) for k, v in self.per_class.items()}
        return rec

    def dumps(self) -> str:
        return json.dumps(self.to_record(), indent=2, sort_keys=True)


def confusion(truth, predicted, n_classes: int = N_LABELS) -> np.ndarray:
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (truth, predicted), 1)
    return m


def score(truth: Sequence, predicted: Sequence) -> MetricsReport:
    """Classes absent from both truth and predictions are left out of the macro mean."""
    t = np.asarray([int(v) for v in truth], dtype=np.int64)
    p = np.asarray([int(v) for v in predicted], dtype=np.int64)
    if len(t) != len(p):
        raise ValueError(f"length mismatch: {len(t)} truth vs {len(p)} predicted")
    if len(t) == 0:
        raise ValueError("cannot score an empty set")
    cm = confusion(t, p)
    tp = np.diag(cm).astype(float)
    support = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    per_class = {}
    f1s, included = [], []
    for c in range(N_LABELS):
        prec = tp[c] / pred_count[c] if pred_count[c] else 0.0
        rec = tp[c] / support[c] if support[c] else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        per_class[EsciLabel(c).word] = ClassScore(float(prec), float(rec), float(f1), int(support[c]))
        f1s.append(f1)
        included.append(support[c] > 0 or pred_count[c] > 0)
    f1s = np.array(f1s)
    inc = np.array(included)
    macro = float(f1s[inc].mean())
    weighted = float((f1s * support).sum() / support.sum())
    return MetricsReport(float(tp.sum() / len(t)), macro, weighted, per_class, int(len(t)))


def compare(reports: Mapping[str, MetricsReport], metric: str = "macro_f1") -> list[tuple[str, MetricsReport]]:
    """Rank by ``metric`` descending; ties keep input order."""
    if not reports:
        raise ValueError("need at least one report")
    items = list(reports.items())
    return sorted(items, key=lambda kv: -kv[1].metric(metric))


def comparison_table(reports: Mapping[str, MetricsReport], metric: str = "macro_f1") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["rank", "model", *METRICS])
    for rank, (name, rep) in enumerate(compare(reports, metric), start=1):
        w.writerow([rank, name, *(f"{rep.metric(m):.6f}" for m in METRICS)])
    return buf.getvalue()
