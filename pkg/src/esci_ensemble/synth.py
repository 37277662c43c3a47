"""Synthetic query-product datasets with behavior graphs of controlled density and label association.

Catalog structure: categories come in sibling pairs that share a "family"
token (a product of the sibling category is a complement). Each category
has subtypes. The relation of a query to a product follows from the catalog:
same subtype -> exact, same category -> substitute, sibling -> complement,
otherwise irrelevant. Labeled pairs draw a product according to their label;
the query or product text is sometimes stripped of its subtype words, which
leaves exact and substitute indistinguishable from text alone.

Edge counts per signal are set exactly so the realized shares match the
configured proportions, counted over edges plus labeled rows. A labeled pair
emits signal ``s`` with probability ``base_s * exp(strength_s * effect[label])``;
background edges connect unlabeled pairs whose relation is drawn in
proportion to the same multipliers.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import BASE_SIGNALS, N_LABELS, DataError, EsciLabel, QueryProductPair, SignalKind, read_pairs, write_pairs
from .graphstore import write_edges

# edges and labeled rows of the reference dataset, in percent of all rows
REFERENCE_SIGNAL_SHARES = {
    "impressions": 40.15,
    "clicks": 49.86,
    "adds": 5.25,
    "purchases": 1.93,
    "consumes": 0.17,
}
REFERENCE_LABEL_SHARES = {"exact": 1.72, "substitute": 0.58, "complement": 0.08, "irrelevant": 0.27}

DEFAULT_STRENGTH = {"impressions": 0.02, "clicks": 0.12, "adds": 0.9, "purchases": 1.3, "consumes": 1.0}
# presence rate of each signal on a labeled substitute pair (effect 0)
BASE_RATE = {"impressions": 0.85, "clicks": 0.5, "adds": 0.15, "purchases": 0.12, "consumes": 0.02}
# mean extra count on top of 1 for an emitted edge
BASE_COUNT = {"impressions": 12.0, "clicks": 4.0, "adds": 1.5, "purchases": 1.0, "consumes": 0.5}
LABEL_EFFECT = np.array([1.0, 0.0, -0.5, -1.5])
# relation mix of background pairs before signal reweighting
BACKGROUND_MIX = np.array([0.2, 0.3, 0.1, 0.4])

META_FILE = "meta.json"
PAIRS_FILE = "pairs.jsonl"
EDGES_FILE = "edges.tsv"


@dataclass
class SynthConfig:
    n_pairs: int = 20000
    n_queries: Optional[int] = None
    n_products: Optional[int] = None
    signal_proportions: dict = field(default_factory=lambda: dict(REFERENCE_SIGNAL_SHARES))
    label_proportions: dict = field(default_factory=lambda: dict(REFERENCE_LABEL_SHARES))
    strength: dict = field(default_factory=lambda: dict(DEFAULT_STRENGTH))
    n_families: int = 15
    n_subtypes: int = 5
    vocab_size: int = 400
    locales: dict = field(default_factory=lambda: {"us": 0.6, "es": 0.2, "jp": 0.2})
    query_ambiguity: float = 0.35
    product_ambiguity: float = 0.2
    product_length: tuple = (20, 120)
    seed: int = 0

    def _catalog_scale(self) -> float:
        # small runs get a larger catalog so every signal's edges fit as distinct pairs
        # and same-cell (exact) pairs stay plentiful
        cells = 2 * self.n_families * self.n_subtypes
        need = max(8 * (max(self.edge_targets().values(), default=0) + self.n_pairs), 4 * self.n_pairs * cells)
        base = max(1, self.n_pairs // 4) * max(1, self.n_pairs // 2)
        return max(1.0, float(np.sqrt(need / base)))

    @property
    def queries(self) -> int:
        if self.n_queries is not None:
            return self.n_queries
        return int(np.ceil(max(1, self.n_pairs // 4) * self._catalog_scale()))

    @property
    def products(self) -> int:
        if self.n_products is not None:
            return self.n_products
        return int(np.ceil(max(1, self.n_pairs // 2) * self._catalog_scale()))

    def validate(self) -> None:
        if self.n_pairs < 0:
            raise ValueError("n_pairs must be >= 0")
        props = self.signal_proportions
        if set(props) != {s.value for s in BASE_SIGNALS}:
            raise ValueError("signal_proportions must name exactly the five base signals")
        if any(v < 0 for v in props.values()) or any(v < 0 for v in self.label_proportions.values()):
            raise ValueError("proportions must be nonnegative")
        if set(self.label_proportions) != {lab.word for lab in EsciLabel}:
            raise ValueError("label_proportions must name the four labels")
        if sum(self.label_proportions.values()) <= 0:
            raise ValueError("label proportions must not all be zero")
        if self.n_families < 2 or self.n_subtypes < 2:
            raise ValueError("need at least 2 families and 2 subtypes")
        for name in ("query_ambiguity", "product_ambiguity"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")

    def edge_targets(self) -> dict[str, int]:
        """Exact edge count per signal so that ``count / (edges + n_pairs)`` hits each proportion."""
        label_pct = sum(self.label_proportions.values())
        rows = self.n_pairs * 100.0 / label_pct if self.n_pairs else 0.0
        return {s: int(round(rows * p / 100.0)) for s, p in self.signal_proportions.items()}

    def label_priors(self) -> np.ndarray:
        v = np.array([self.label_proportions[lab.word] for lab in EsciLabel], dtype=float)
        return v / v.sum()

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["product_length"] = list(self.product_length)
        return rec

    @classmethod
    def from_mapping(cls, data: dict) -> "SynthConfig":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        if "product_length" in data:
            data["product_length"] = tuple(data["product_length"])
        return cls(**data)


@dataclass
class SynthDataset:
    pairs: list
    edges: list  # (query_id, product_id, SignalKind, weight)
    meta: dict


class _Catalog:
    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        self.cfg = cfg
        n_cat = 2 * cfg.n_families
        self.n_cat = n_cat
        P, Q = cfg.products, cfg.queries
        self.p_cat = rng.integers(0, n_cat, P)
        self.p_sub = rng.integers(0, cfg.n_subtypes, P)
        self.q_cat = rng.integers(0, n_cat, Q)
        self.q_sub = rng.integers(0, cfg.n_subtypes, Q)
        locs = sorted(cfg.locales)
        lp = np.array([cfg.locales[k] for k in locs], dtype=float)
        self.q_locale = [locs[i] for i in rng.choice(len(locs), Q, p=lp / lp.sum())]
        # products indexed by (category, subtype)
        self.cell = {}
        for i in np.argsort(self.p_cat * cfg.n_subtypes + self.p_sub, kind="stable"):
            self.cell.setdefault((int(self.p_cat[i]), int(self.p_sub[i])), []).append(int(i))
        self.by_cat = {c: sorted(sum((self.cell.get((c, s), []) for s in range(cfg.n_subtypes)), []))
                       for c in range(n_cat)}

    @staticmethod
    def sibling(c: int) -> int:
        return c ^ 1

    def relation(self, q: int, p: int) -> int:
        qc, pc = self.q_cat[q], self.p_cat[p]
        if qc == pc:
            return int(EsciLabel.EXACT) if self.q_sub[q] == self.p_sub[p] else int(EsciLabel.SUBSTITUTE)
        if pc == self.sibling(int(qc)):
            return int(EsciLabel.COMPLEMENT)
        return int(EsciLabel.IRRELEVANT)

    def draw_product(self, q: int, label: int, rng: np.random.Generator) -> Optional[int]:
        """A product standing in relation ``label`` to query ``q``, or None if there is none."""
        qc, qs = int(self.q_cat[q]), int(self.q_sub[q])
        if label == EsciLabel.EXACT:
            pool = self.cell.get((qc, qs), [])
            return pool[rng.integers(len(pool))] if pool else None
        if label == EsciLabel.SUBSTITUTE:
            same = self.by_cat[qc]
            n_exact = len(self.cell.get((qc, qs), []))
            if len(same) == n_exact:
                return None
            for _ in range(64):
                p = same[rng.integers(len(same))]
                if self.p_sub[p] != qs:
                    return p
            return None
        if label == EsciLabel.COMPLEMENT:
            pool = self.by_cat[self.sibling(qc)]
            return pool[rng.integers(len(pool))] if pool else None
        P = len(self.p_cat)
        for _ in range(64):
            p = int(rng.integers(P))
            if self.p_cat[p] != qc and self.p_cat[p] != self.sibling(qc):
                return p
        return None


def _family_word(c: int) -> str:
    return f"fam{c // 2}"


def _cat_words(c: int) -> list[str]:
    return [f"cat{c}a", f"cat{c}b", f"cat{c}c"]


def _sub_words(c: int, s: int) -> list[str]:
    return [f"c{c}sub{s}x", f"c{c}sub{s}y"]


def _texts(cat: _Catalog, rng: np.random.Generator):
    cfg = cat.cfg
    zipf = 1.0 / np.arange(1, cfg.vocab_size + 1)
    zipf /= zipf.sum()
    products = []
    for i in range(len(cat.p_cat)):
        c, s = int(cat.p_cat[i]), int(cat.p_sub[i])
        head = [_family_word(c)] + list(rng.choice(_cat_words(c), size=2, replace=False))
        if rng.random() >= cfg.product_ambiguity:
            head += _sub_words(c, s)
        n = int(rng.integers(cfg.product_length[0], cfg.product_length[1] + 1))
        noise = [f"w{k}" for k in rng.choice(cfg.vocab_size, size=n, p=zipf)]
        body = head + noise
        order = rng.permutation(len(body))
        products.append(" ".join(body[j] for j in order))
    queries = []
    for i in range(len(cat.q_cat)):
        c, s = int(cat.q_cat[i]), int(cat.q_sub[i])
        words = [_family_word(c), _cat_words(c)[int(rng.integers(3))]]
        if rng.random() >= cfg.query_ambiguity:
            words.append(_sub_words(c, s)[int(rng.integers(2))])
        if rng.random() < 0.5:
            words.append(f"w{int(rng.integers(cfg.vocab_size))}")
        queries.append(" ".join(words))
    return queries, products


def _multiplier(strength: float) -> np.ndarray:
    return np.exp(strength * LABEL_EFFECT)


def generate(config: SynthConfig) -> SynthDataset:
    config.validate()
    rng = np.random.default_rng(config.seed)
    cat = _Catalog(config, rng)
    q_text, p_text = _texts(cat, rng)
    priors = config.label_priors()
    signals = [s.value for s in BASE_SIGNALS]
    targets = config.edge_targets()

    # labeled pairs
    pairs: list[QueryProductPair] = []
    labels = []
    used: set[tuple[int, int]] = set()
    Q = len(cat.q_cat)
    while len(pairs) < config.n_pairs:
        # the label is fixed first so rejected draws do not skew label shares
        label = int(rng.choice(N_LABELS, p=priors))
        for _ in range(10_000):
            q = int(rng.integers(Q))
            p = cat.draw_product(q, label, rng)
            if p is not None and (q, p) not in used:
                break
        else:
            raise DataError("catalog too small for the requested number of distinct pairs")
        used.add((q, p))
        labels.append(label)
        pairs.append(QueryProductPair(f"q{q}", f"p{p}", q_text[q], p_text[p], cat.q_locale[q], EsciLabel(label)))

    # edges on labeled pairs
    edges: dict[tuple[int, int, str], float] = {}
    labeled_counts = {}
    y = np.array(labels, dtype=np.int64)
    qp = np.array([(int(p.query_id[1:]), int(p.product_id[1:])) for p in pairs], dtype=np.int64).reshape(-1, 2)
    for s in signals:
        mult = _multiplier(config.strength.get(s, 0.0))
        prob = np.minimum(0.98, BASE_RATE[s] * mult[y]) if len(y) else np.zeros(0)
        hit = rng.random(len(y)) < prob
        counts = 1 + rng.poisson(BASE_COUNT[s] * mult[y]) if len(y) else np.zeros(0, np.int64)
        idx = np.flatnonzero(hit)
        if len(idx) > targets[s]:
            idx = np.sort(rng.choice(idx, size=targets[s], replace=False))
        for i in idx:
            edges[(int(qp[i, 0]), int(qp[i, 1]), s)] = float(counts[i])
        labeled_counts[s] = len(idx)

    # background edges on unlabeled pairs, relation drawn in proportion to the multipliers
    for s in signals:
        mult = _multiplier(config.strength.get(s, 0.0))
        mix = BACKGROUND_MIX * mult
        mix /= mix.sum()
        need = targets[s] - labeled_counts[s]
        stalls = 0
        while need > 0:
            batch = max(64, int(need * 1.2))
            qs = rng.integers(Q, size=batch)
            rels = rng.choice(N_LABELS, size=batch, p=mix)
            extra = 1 + rng.poisson(BASE_COUNT[s] * mult[rels])
            added = 0
            for q, r, w in zip(qs.tolist(), rels.tolist(), extra.tolist()):
                if need <= 0:
                    break
                p = cat.draw_product(q, r, rng)
                if p is None or (q, p) in used or (q, p, s) in edges:
                    continue
                edges[(q, p, s)] = float(w)
                need -= 1
                added += 1
            stalls = stalls + 1 if added == 0 else 0
            if stalls > 20:
                raise DataError(f"cannot place {targets[s]} distinct {s} edges in this catalog")

    order = sorted(edges, key=lambda k: (signals.index(k[2]), k[0], k[1]))
    edge_list = [(f"q{q}", f"p{p}", SignalKind(s), edges[(q, p, s)]) for q, p, s in order]
    meta = {"config": config.to_record(), "targets": targets, "realized": describe(pairs, edge_list)}
    return SynthDataset(pairs, edge_list, meta)


def describe(pairs: Sequence[QueryProductPair], edges) -> dict:
    """Edge and label counts, shares over all rows, and signal/label correlations.

    Shares use edges plus labeled rows as the denominator. The correlation of
    signal ``s`` with label ``c`` is the Pearson correlation, over labeled
    pairs, between "the pair has an ``s`` edge" and "the pair is labeled
    ``c``"; a signal's association is its largest absolute correlation.
    """
    signals = [s.value for s in BASE_SIGNALS]
    counts = {s: 0 for s in signals}
    present: dict[str, set] = {s: set() for s in signals}
    for q, p, sig, _w in edges:
        s = sig.value if isinstance(sig, SignalKind) else str(sig)
        counts[s] += 1
        present[s].add((q, p))
    labeled = [p for p in pairs if p.label is not None]
    label_counts = {lab.word: 0 for lab in EsciLabel}
    for p in labeled:
        label_counts[p.label.word] += 1
    total = sum(counts.values()) + len(labeled)
    shares = {k: (100.0 * v / total if total else 0.0) for k, v in {**counts, **label_counts}.items()}
    corr = {s: {lab.word: 0.0 for lab in EsciLabel} for s in signals}
    assoc = {s: 0.0 for s in signals}
    if labeled:
        y = np.array([int(p.label) for p in labeled])
        for s in signals:
            x = np.array([(p.query_id, p.product_id) in present[s] for p in labeled], dtype=float)
            for lab in EsciLabel:
                t = (y == int(lab)).astype(float)
                if x.std() > 0 and t.std() > 0:
                    corr[s][lab.word] = float(np.corrcoef(x, t)[0, 1])
            assoc[s] = max(abs(v) for v in corr[s].values())
    return {
        "edge_counts": counts,
        "label_counts": label_counts,
        "total_rows": total,
        "shares_pct": shares,
        "correlation": corr,
        "association": assoc,
    }


def write_dataset(ds: SynthDataset, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"pairs": out / PAIRS_FILE, "edges": out / EDGES_FILE, "meta": out / META_FILE}
    write_pairs(ds.pairs, paths["pairs"])
    write_edges(ds.edges, paths["edges"])
    paths["meta"].write_text(json.dumps(ds.meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def describe_files(pairs_path, edges_path) -> dict:
    """``describe`` over files on disk; an edge file with only a header is fine."""
    pairs = read_pairs(pairs_path)
    graphs_edges = []
    with Path(edges_path).open(encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4 or parts[0] == "query_id" or not line.strip():
                continue
            graphs_edges.append((parts[0], parts[1], SignalKind.parse(parts[2]), float(parts[3])))
    return describe(pairs, graphs_edges)


__all__ = [
    "SynthConfig",
    "SynthDataset",
    "REFERENCE_SIGNAL_SHARES",
    "describe",
    "describe_files",
    "generate",
    "write_dataset",
]
