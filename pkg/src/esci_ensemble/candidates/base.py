"""Shared candidate-model interface and checkpoint plumbing."""

from __future__ import annotations

import hashlib
import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..core import DataError, LabelDistribution, QueryProductPair, SignalKind
from ..denoiser import TokenSeq
from ..graphstore import Subgraph

CHECKPOINT_VERSION = "esci-candidate v1"


class CandidateError(RuntimeError):
    """A candidate could not produce a prediction for a pair."""


@dataclass
class CandidateInputs:
    """Everything a candidate may read for a batch of pairs.

    ``subgraphs[i]`` is ``None`` when pair ``i`` has no cached neighborhood.
    """

    pairs: Sequence[QueryProductPair]
    tokens: Sequence[TokenSeq]
    subgraphs: Optional[Sequence[Optional[Subgraph]]] = None
    node_features: Optional[object] = None

    def __len__(self):
        return len(self.pairs)

    def subset(self, idx) -> "CandidateInputs":
        idx = list(idx)
        return CandidateInputs(
            [self.pairs[i] for i in idx],
            [self.tokens[i] for i in idx],
            None if self.subgraphs is None else [self.subgraphs[i] for i in idx],
            self.node_features,
        )


class Candidate(ABC):
    """A trained model mapping a query-product pair to four label probabilities."""

    name: str
    kind: str
    requires_graph: bool = False
    signal: Optional[SignalKind] = None

    @abstractmethod
    def predict_many(self, inputs: CandidateInputs) -> np.ndarray:
        """``(n, 4)`` probabilities; rows the candidate cannot score are NaN."""

    @abstractmethod
    def to_record(self) -> dict: ...

    @property
    def n_parameters(self) -> int:
        return sum(int(np.size(v)) for v in self.parameter_arrays().values())

    @abstractmethod
    def parameter_arrays(self) -> dict[str, np.ndarray]: ...

    def available(self, inputs: CandidateInputs) -> np.ndarray:
        """Boolean mask of the pairs this candidate can score."""
        if not self.requires_graph:
            return np.ones(len(inputs), dtype=bool)
        if inputs.subgraphs is None:
            return np.zeros(len(inputs), dtype=bool)
        return np.array([s is not None for s in inputs.subgraphs], dtype=bool)

    def dumps(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def predict(
    candidate: Candidate,
    pair: QueryProductPair,
    tokens: TokenSeq,
    subgraph: Optional[Subgraph] = None,
    node_features=None,
) -> LabelDistribution:
    """Single-pair prediction; a graph candidate without a subgraph raises."""
    if candidate.requires_graph and subgraph is None:
        raise CandidateError(f"candidate {candidate.name!r} needs a subgraph for {pair.key}")
    out = candidate.predict_many(CandidateInputs([pair], [tokens], [subgraph], node_features))
    return LabelDistribution.from_array(out[0])


def array_record(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=float)
    return {"shape": list(arr.shape), "data": arr.ravel().tolist()}


def array_from_record(rec: dict) -> np.ndarray:
    return np.array(rec["data"], dtype=float).reshape(rec["shape"])


def load_candidate(path) -> Candidate:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"candidate checkpoint not found: {path}")
    return candidate_from_record(json.loads(path.read_text(encoding="utf-8")))


def candidate_from_record(rec: dict) -> Candidate:
    from .gnn import GnnCandidate
    from .semantic import SemanticCandidate

    if rec.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported candidate checkpoint version {rec.get('version')!r}")
    kinds = {"semantic": SemanticCandidate, "graph": GnnCandidate}
    try:
        cls = kinds[rec["kind"]]
    except KeyError:
        raise DataError(f"unknown candidate kind {rec.get('kind')!r}") from None
    return cls.from_record(rec)
