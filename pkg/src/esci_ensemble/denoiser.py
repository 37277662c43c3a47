"""TF-IDF truncation of product descriptions and query/product sequence assembly."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .core import DataError, QueryProductPair

SEP = "[SEP]"
DEFAULT_MAX_LEN = 512
TOKEN_CACHE_HEADER = "# esci-token-cache v1"

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class CorpusStats:
    doc_count: int
    doc_freq: Mapping[str, int] = field(default_factory=dict)

    def df(self, token: str) -> int:
        return self.doc_freq.get(token, 1)

    def to_record(self) -> dict:
        return {"doc_count": self.doc_count, "doc_freq": dict(sorted(self.doc_freq.items()))}

    @classmethod
    def from_record(cls, record: dict) -> "CorpusStats":
        return cls(int(record["doc_count"]), dict(record["doc_freq"]))


@dataclass(frozen=True)
class TokenSeq:
    tokens: tuple[str, ...]
    sep_index: int

    @property
    def query_tokens(self) -> tuple[str, ...]:
        return self.tokens[: self.sep_index]

    @property
    def product_tokens(self) -> tuple[str, ...]:
        return self.tokens[self.sep_index + 1 :]


def fit_corpus(products: Sequence[Sequence[str]]) -> CorpusStats:
    if not products:
        raise ValueError("cannot fit corpus statistics on an empty corpus")
    df: Counter = Counter()
    for doc in products:
        df.update(set(doc))
    return CorpusStats(len(products), dict(df))


def tfidf_scores(tokens: Sequence[str], stats: CorpusStats) -> list[float]:
    """Per-position TF-IDF: raw in-document count times ``ln(N / DF)``."""
    tf = Counter(tokens)
    n = stats.doc_count
    return [tf[t] * math.log(n / stats.df(t)) for t in tokens]


def denoise(tokens: Sequence[str], stats: CorpusStats, budget: int) -> list[str]:
    """Keep at most ``budget`` tokens with the highest TF-IDF, in original order.

    Equal scores are broken toward earlier positions.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    tokens = list(tokens)
    if len(tokens) <= budget:
        return tokens
    scores = tfidf_scores(tokens, stats)
    ranked = sorted(range(len(tokens)), key=lambda i: (-scores[i], i))
    keep = sorted(ranked[:budget])
    return [tokens[i] for i in keep]


def assemble(query: Sequence[str], product: Sequence[str], max_len: int = DEFAULT_MAX_LEN) -> TokenSeq:
    """Build ``query + [SEP] + product``, cutting the product tail to fit ``max_len``."""
    query = list(query)
    if len(query) > max_len - 1:
        raise ValueError(f"query of {len(query)} tokens does not fit max_len={max_len}")
    room = max_len - len(query) - 1
    return TokenSeq(tuple(query + [SEP] + list(product)[:room]), len(query))


class Denoiser:
    """Fitted TF-IDF statistics plus the budget, applied per pair.

    With ``per_locale`` set, document frequencies are counted separately
    for each locale; locales unseen at fit time fall back to the global
    statistics.
    """

    def __init__(self, budget: int = 64, max_len: int = DEFAULT_MAX_LEN, per_locale: bool = False):
        self.budget = budget
        self.max_len = max_len
        self.per_locale = per_locale
        self.global_stats: Optional[CorpusStats] = None
        self.locale_stats: dict[str, CorpusStats] = {}

    def fit(self, pairs: Iterable[QueryProductPair]) -> "Denoiser":
        # one document per distinct product
        docs: dict[str, tuple[str, list[str]]] = {}
        for pair in pairs:
            docs.setdefault(pair.product_id, (pair.locale, tokenize(pair.product_text)))
        if not docs:
            raise ValueError("cannot fit a denoiser without products")
        self.global_stats = fit_corpus([toks for _, toks in docs.values()])
        if self.per_locale:
            by_locale: dict[str, list] = {}
            for locale, toks in docs.values():
                by_locale.setdefault(locale, []).append(toks)
            self.locale_stats = {loc: fit_corpus(d) for loc, d in sorted(by_locale.items())}
        return self

    def stats_for(self, locale: str) -> CorpusStats:
        if self.global_stats is None:
            raise RuntimeError("denoiser is not fitted")
        if self.per_locale:
            return self.locale_stats.get(locale, self.global_stats)
        return self.global_stats

    def product_tokens(self, pair: QueryProductPair) -> list[str]:
        return denoise(tokenize(pair.product_text), self.stats_for(pair.locale), self.budget)

    def sequence(self, pair: QueryProductPair, cached: Optional[Mapping[str, list]] = None) -> TokenSeq:
        if cached is not None and pair.product_id in cached:
            product = cached[pair.product_id]
        else:
            product = self.product_tokens(pair)
        query = tokenize(pair.query_text)[: self.max_len - 1]
        return assemble(query, product, self.max_len)

    def to_record(self) -> dict:
        return {
            "budget": self.budget,
            "max_len": self.max_len,
            "per_locale": self.per_locale,
            "global": None if self.global_stats is None else self.global_stats.to_record(),
            "locales": {k: v.to_record() for k, v in self.locale_stats.items()},
        }

    @classmethod
    def from_record(cls, record: dict) -> "Denoiser":
        d = cls(record["budget"], record["max_len"], record["per_locale"])
        if record["global"] is not None:
            d.global_stats = CorpusStats.from_record(record["global"])
        d.locale_stats = {k: CorpusStats.from_record(v) for k, v in record["locales"].items()}
        return d


def save_token_cache(mapping: Mapping[str, Sequence[str]], path) -> None:
    """Write ``product_id -> denoised tokens`` as JSON lines behind a version header."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(TOKEN_CACHE_HEADER + "\n")
        for pid, toks in mapping.items():
            fh.write(json.dumps({"product_id": pid, "tokens": list(toks)}, ensure_ascii=False) + "\n")


def load_token_cache(path) -> dict[str, list[str]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"token cache not found: {path}")
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != TOKEN_CACHE_HEADER:
            raise DataError(f"{path}: unsupported token cache header {header!r}")
        out = {}
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["product_id"]] = rec["tokens"]
    return out
