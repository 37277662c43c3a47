"""Candidate models producing per-pair label distributions."""

from .base import (
    CHECKPOINT_VERSION,
    Candidate,
    CandidateError,
    CandidateInputs,
    candidate_from_record,
    load_candidate,
    predict,
)
from .gnn import GnnCandidate, GnnParams, NodeFeatureTable, gnn_forward, gnn_train
from .semantic import SemanticCandidate, SemanticParams, semantic_train

__all__ = [
    "CHECKPOINT_VERSION",
    "Candidate",
    "CandidateError",
    "CandidateInputs",
    "GnnCandidate",
    "GnnParams",
    "NodeFeatureTable",
    "SemanticCandidate",
    "SemanticParams",
    "candidate_from_record",
    "gnn_forward",
    "gnn_train",
    "load_candidate",
    "predict",
    "semantic_train",
]
