"""Domain types, label taxonomy and file readers/writers shared by every stage."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

N_LABELS = 4


class DataError(ValueError):
    """Raised when an input artifact is missing or violates its schema."""


class EsciLabel(enum.IntEnum):
    EXACT = 0
    SUBSTITUTE = 1
    COMPLEMENT = 2
    IRRELEVANT = 3

    @property
    def word(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: str) -> "EsciLabel":
        try:
            return cls[value.strip().upper()]
        except KeyError:
            raise DataError(f"unknown label {value!r}") from None


LABEL_WORDS = tuple(label.word for label in EsciLabel)


class SignalKind(enum.Enum):
    IMPRESSIONS = "impressions"
    CLICKS = "clicks"
    ADDS = "adds"
    PURCHASES = "purchases"
    CONSUMES = "consumes"
    ANY = "any"
    HET_ALL = "hetall"

    @classmethod
    def parse(cls, value: str) -> "SignalKind":
        try:
            return cls(value.strip().lower().replace("-", "").replace("_", ""))
        except ValueError:
            raise DataError(f"unknown signal {value!r}") from None

    @property
    def is_base(self) -> bool:
        return self in BASE_SIGNALS


BASE_SIGNALS = (
    SignalKind.IMPRESSIONS,
    SignalKind.CLICKS,
    SignalKind.ADDS,
    SignalKind.PURCHASES,
    SignalKind.CONSUMES,
)


@dataclass(frozen=True)
class QueryProductPair:
    query_id: str
    product_id: str
    query_text: str
    product_text: str
    locale: str
    label: Optional[EsciLabel] = None

    def __post_init__(self):
        if not self.query_id or not self.product_id:
            raise DataError("query_id and product_id must be non-empty")

    @property
    def key(self) -> tuple[str, str]:
        return (self.query_id, self.product_id)

    def to_record(self) -> dict:
        return {
            "query_id": self.query_id,
            "product_id": self.product_id,
            "query_text": self.query_text,
            "product_text": self.product_text,
            "locale": self.locale,
            "label": None if self.label is None else self.label.word,
        }


@dataclass(frozen=True)
class LabelDistribution:
    probs: tuple[float, float, float, float]

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        if len(probs) != N_LABELS:
            raise ValueError(f"expected {N_LABELS} probabilities, got {len(probs)}")
        if any(not (0.0 <= p <= 1.0) for p in probs):
            raise ValueError(f"probabilities out of [0, 1]: {probs}")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {sum(probs)!r}, not 1")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_array(cls, arr) -> "LabelDistribution":
        return cls(tuple(np.asarray(arr, dtype=float).tolist()))

    @property
    def argmax(self) -> EsciLabel:
        return EsciLabel(int(np.argmax(self.probs)))

    def as_array(self) -> np.ndarray:
        return np.array(self.probs)


_PAIR_FIELDS = ("query_id", "product_id", "query_text", "product_text", "locale")


def _parse_pair(record, lineno: int) -> QueryProductPair:
    if not isinstance(record, dict):
        raise DataError(f"line {lineno}: expected an object")
    for field in _PAIR_FIELDS:
        value = record.get(field)
        if not isinstance(value, str):
            raise DataError(f"line {lineno}: missing or non-string field {field!r}")
        if field in ("query_id", "product_id") and not value:
            raise DataError(f"line {lineno}: empty field {field!r}")
    raw_label = record.get("label")
    try:
        label = None if raw_label in (None, "") else EsciLabel.parse(str(raw_label))
    except DataError as exc:
        raise DataError(f"line {lineno}: {exc}") from None
    return QueryProductPair(*(record[f] for f in _PAIR_FIELDS), label=label)


def read_pairs(path) -> list[QueryProductPair]:
    """Read a JSON-lines pairs file, preserving order.

    Blank lines are skipped. Any malformed record raises :class:`DataError`
    naming its 1-based line number.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"pairs file not found: {path}")
    pairs = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            pairs.append(_parse_pair(record, lineno))
    return pairs


def write_pairs(pairs: Iterable[QueryProductPair], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair.to_record(), ensure_ascii=False, sort_keys=True))
            fh.write("\n")


PREDICTION_COLUMNS = (
    "pair_index",
    "p_exact",
    "p_substitute",
    "p_complement",
    "p_irrelevant",
    "predicted",
)
ERROR_MARK = "error"


@dataclass(frozen=True)
class PredictionRow:
    pair_index: int
    distribution: Optional[LabelDistribution]
    predicted: Optional[EsciLabel]

    @property
    def is_error(self) -> bool:
        return self.distribution is None


def write_predictions(rows: Sequence, path) -> None:
    """Write prediction rows as tab-separated text with a header.

    ``rows`` holds ``PredictionRow`` objects or ``(index, distribution, label)``
    tuples; a ``None`` distribution marks an error row.
    """
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(PREDICTION_COLUMNS)
        for row in rows:
            if not isinstance(row, PredictionRow):
                row = PredictionRow(*row)
            if row.is_error:
                writer.writerow([row.pair_index, *(["nan"] * N_LABELS), ERROR_MARK])
                continue
            label = row.predicted if row.predicted is not None else row.distribution.argmax
            writer.writerow(
                [row.pair_index, *(repr(p) for p in row.distribution.probs), label.word]
            )


def read_predictions(path) -> list[PredictionRow]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"predictions file not found: {path}")
    rows = []
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header) != PREDICTION_COLUMNS:
            raise DataError(f"{path}: bad predictions header {header!r}")
        for lineno, fields in enumerate(reader, start=2):
            if len(fields) != len(PREDICTION_COLUMNS):
                raise DataError(f"line {lineno}: expected {len(PREDICTION_COLUMNS)} columns")
            index = int(fields[0])
            if fields[-1] == ERROR_MARK:
                rows.append(PredictionRow(index, None, None))
                continue
            probs = tuple(float(x) for x in fields[1:5])
            if any(math.isnan(p) for p in probs):
                raise DataError(f"line {lineno}: NaN probability on a scored row")
            rows.append(PredictionRow(index, LabelDistribution(probs), EsciLabel.parse(fields[5])))
    return rows


def labels_array(pairs: Sequence[QueryProductPair]) -> np.ndarray:
    if any(p.label is None for p in pairs):
        raise DataError("training rows must carry a label")
    return np.array([int(p.label) for p in pairs], dtype=np.int64)


def softmax(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)
