"""Staged training and batched inference over cached subgraphs and token sequences.

Training stacks: candidate predictions for the booster come from models
that did not see the row (out-of-fold), and the deployed candidates are then
refit on every training row. Inference scores pairs in fixed-size batches
so results do not depend on the number of workers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import yaml

from . import gbdt
from .candidates import (
    Candidate,
    CandidateInputs,
    GnnParams,
    NodeFeatureTable,
    SemanticParams,
    gnn_train,
    load_candidate,
    semantic_train,
)
from .core import (
    N_LABELS,
    DataError,
    LabelDistribution,
    PredictionRow,
    QueryProductPair,
    SignalKind,
    labels_array,
)
from .denoiser import Denoiser
from .evaluation import MetricsReport, score
from .graphstore import DEFAULT_CAP, DEFAULT_HOPS, GraphSet, SubgraphCache, build_cache
from .selection import Entry, SelectionState, select_initial
from .shapley import GlobalImportance, global_importance, model_shares, sample_background

log = logging.getLogger(__name__)

RELIABILITY = "reliability"
AVAILABILITY = "availability"
POLICIES = (RELIABILITY, AVAILABILITY)
INFER_BATCH = 512
MODEL_MANIFEST = "model.json"
OOF_FILE = "oof.npy"
GBDT_FILE = "gbdt.ckpt"
DENOISER_FILE = "denoiser.json"
NODE_TABLE_FILE = "node_features.json"
TRAIN_MANIFEST = "train_manifest.json"


class ConfigError(ValueError):
    """The pipeline configuration is invalid."""


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ----------------------------------------------------------------------------
# configuration


@dataclass
class CandidateSpec:
    name: str
    kind: str  # "semantic" | "graph"
    signal: Optional[SignalKind] = None
    params: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not self.name:
            raise ConfigError("candidate name must be non-empty")
        if self.kind not in ("semantic", "graph"):
            raise ConfigError(f"candidate {self.name!r}: kind must be 'semantic' or 'graph'")
        if self.kind == "graph" and self.signal is None:
            raise ConfigError(f"candidate {self.name!r}: graph candidates need a signal")
        try:
            self._params(None)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"candidate {self.name!r}: {exc}") from None

    @property
    def relation(self) -> Optional[str]:
        return None if self.signal is None else self.signal.value

    def _params(self, labels, seed: int = 0):
        p = dict(self.params)
        p.setdefault("seed", seed)
        cw = p.get("class_weights")
        if isinstance(cw, str):
            if cw != "balanced":
                raise ValueError(f"unknown class_weights {cw!r}")
            p["class_weights"] = None if labels is None else gbdt.balanced_class_weights(labels)
        elif cw is not None:
            p["class_weights"] = tuple(float(x) for x in cw)
        if self.kind == "semantic":
            return SemanticParams(**p)
        gp = GnnParams(**p)
        gp.validate()
        return gp

    def train(self, inputs: CandidateInputs, labels: np.ndarray, seed: int) -> Candidate:
        params = self._params(labels, seed)
        if self.kind == "semantic":
            return semantic_train(self.name, inputs, labels, params)
        return gnn_train(self.name, inputs, labels, self.signal, params)


def _default_candidates() -> list[CandidateSpec]:
    sem = {"epochs": 8, "batch_size": 64, "learning_rate": 0.5}
    gnn = {"epochs": 4, "batch_size": 128, "learning_rate": 0.2}
    specs = [CandidateSpec("semantic", "semantic", None, sem)]
    for sig in ("purchases", "adds", "clicks", "hetall"):
        specs.append(CandidateSpec(f"gnn-{sig}", "graph", SignalKind.parse(sig), dict(gnn)))
    return specs


@dataclass
class PipelineConfig:
    seed: int = 0
    policy: str = AVAILABILITY
    workers: int = 1
    hops: int = DEFAULT_HOPS
    cap: int = DEFAULT_CAP
    denoise_budget: int = 64
    max_len: int = 512
    per_locale: bool = False
    text_dim: int = 12
    candidates: list = field(default_factory=_default_candidates)
    gbdt: dict = field(default_factory=dict)
    stacking_folds: int = 3
    selection_budget: Optional[float] = None
    selection_metric: str = "macro_f1"
    selection_costs: dict = field(default_factory=dict)
    selection_top: Optional[int] = None

    def validate(self) -> None:
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.hops < 0 or self.cap < 2:
            raise ConfigError("graph.k must be >= 0 and graph.cap >= 2")
        if self.denoise_budget < 1 or self.max_len < 2:
            raise ConfigError("denoise.budget must be >= 1 and denoise.max_len >= 2")
        if self.stacking_folds < 2:
            raise ConfigError("stacking_folds must be >= 2")
        if not self.candidates:
            raise ConfigError("at least one candidate is required")
        names = [c.name for c in self.candidates]
        if len(set(names)) != len(names):
            raise ConfigError(f"candidate names must be unique: {names}")
        for c in self.candidates:
            c.validate()
        try:
            self.gbdt_params([0, 1]).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"gbdt: {exc}") from None

    def gbdt_params(self, labels) -> gbdt.GbdtParams:
        p = dict(self.gbdt)
        p.setdefault("seed", self.seed)
        cw = p.get("class_weights")
        if isinstance(cw, str):
            if cw != "balanced":
                raise ValueError(f"unknown class_weights {cw!r}")
            p["class_weights"] = gbdt.balanced_class_weights(labels)
        return gbdt.params_from_record(p)

    def to_mapping(self) -> dict:
        return {
            "seed": self.seed,
            "policy": self.policy,
            "workers": self.workers,
            "graph": {"k": self.hops, "cap": self.cap},
            "denoise": {"budget": self.denoise_budget, "max_len": self.max_len, "per_locale": self.per_locale},
            "node_features": {"text_dim": self.text_dim},
            "candidates": [
                {"name": c.name, "kind": c.kind, **({"signal": c.signal.value} if c.signal else {}),
                 "params": dict(c.params)}
                for c in self.candidates
            ],
            "gbdt": dict(self.gbdt),
            "stacking_folds": self.stacking_folds,
            "selection": {"budget": self.selection_budget, "metric": self.selection_metric,
                          "costs": dict(self.selection_costs), "top": self.selection_top},
        }

    @classmethod
    def from_mapping(cls, data: Optional[Mapping]) -> "PipelineConfig":
        data = dict(data or {})
        known = {"seed", "policy", "workers", "graph", "denoise", "node_features", "candidates", "gbdt",
                 "stacking_folds", "selection", "synth"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        try:
            cfg.seed = int(data.get("seed", cfg.seed))
            cfg.policy = str(data.get("policy", cfg.policy)).lower()
            cfg.workers = int(data.get("workers", cfg.workers))
            graph = data.get("graph") or {}
            cfg.hops = int(graph.get("k", cfg.hops))
            cfg.cap = int(graph.get("cap", cfg.cap))
            den = data.get("denoise") or {}
            cfg.denoise_budget = int(den.get("budget", cfg.denoise_budget))
            cfg.max_len = int(den.get("max_len", cfg.max_len))
            cfg.per_locale = bool(den.get("per_locale", cfg.per_locale))
            cfg.text_dim = int((data.get("node_features") or {}).get("text_dim", cfg.text_dim))
            if "candidates" in data:
                cfg.candidates = []
                for c in data["candidates"] or []:
                    sig = c.get("signal")
                    cfg.candidates.append(CandidateSpec(
                        str(c["name"]), str(c.get("kind", "graph" if sig else "semantic")),
                        SignalKind.parse(sig) if sig else None, dict(c.get("params") or {})))
            cfg.gbdt = dict(data.get("gbdt") or {})
            cfg.stacking_folds = int(data.get("stacking_folds", cfg.stacking_folds))
            sel = data.get("selection") or {}
            cfg.selection_budget = None if sel.get("budget") is None else float(sel["budget"])
            cfg.selection_metric = str(sel.get("metric", cfg.selection_metric))
            cfg.selection_costs = {str(k): float(v) for k, v in (sel.get("costs") or {}).items()}
            cfg.selection_top = None if sel.get("top") is None else int(sel["top"])
        except (KeyError, TypeError, ValueError, DataError) as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        cfg.validate()
        return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return PipelineConfig.from_mapping(data)


# ----------------------------------------------------------------------------
# caches


@dataclass
class Caches:
    denoiser: Denoiser
    tokens: dict  # product_id -> denoised tokens
    subgraphs: Optional[SubgraphCache] = None
    node_features: Optional[NodeFeatureTable] = None

    def inputs(self, pairs: Sequence[QueryProductPair]) -> CandidateInputs:
        toks = [self.denoiser.sequence(p, self.tokens) for p in pairs]
        subs = None
        if self.subgraphs is not None:
            subs = [self.subgraphs.get_pair(p.query_id, p.product_id) for p in pairs]
        return CandidateInputs(list(pairs), toks, subs, self.node_features)

    def save_fitted(self, out_dir) -> None:
        """State fitted on training rows: denoiser statistics and the node feature table."""
        out = Path(out_dir)
        (out / DENOISER_FILE).write_text(json.dumps(self.denoiser.to_record()), encoding="utf-8")
        if self.node_features is not None:
            self.node_features.save(out / NODE_TABLE_FILE)

    @classmethod
    def load_fitted(cls, model_dir) -> "Caches":
        d = Path(model_dir)
        if not (d / DENOISER_FILE).is_file():
            raise DataError(f"no fitted denoiser in {d} (missing {DENOISER_FILE})")
        den = Denoiser.from_record(json.loads((d / DENOISER_FILE).read_text(encoding="utf-8")))
        table = NodeFeatureTable.load(d / NODE_TABLE_FILE) if (d / NODE_TABLE_FILE).is_file() else None
        return cls(den, {}, None, table)


def fit_denoiser(pairs: Sequence[QueryProductPair], config: PipelineConfig) -> tuple[Denoiser, dict]:
    den = Denoiser(config.denoise_budget, config.max_len, config.per_locale).fit(pairs)
    tokens = {}
    for p in pairs:
        if p.product_id not in tokens:
            tokens[p.product_id] = den.product_tokens(p)
    return den, tokens


def prepare_caches(pairs: Sequence[QueryProductPair], graphs: Optional[GraphSet], config: PipelineConfig,
                   workers: Optional[int] = None) -> Caches:
    den, tokens = fit_denoiser(pairs, config)
    caches = Caches(den, tokens)
    if graphs is not None:
        caches.subgraphs = build_cache(pairs, graphs, config.hops, config.cap, workers or config.workers)
        caches.node_features = NodeFeatureTable.build(graphs, pairs, config.text_dim)
    return caches


# ----------------------------------------------------------------------------
# folds


def _canonical_order(pairs: Sequence[QueryProductPair], seed: int) -> np.ndarray:
    """Row indices in an order that depends on pair keys and seed only."""
    keys = sorted(range(len(pairs)), key=lambda i: pairs[i].key)
    perm = np.random.default_rng(seed).permutation(len(keys))
    return np.array(keys, dtype=np.int64)[perm] if keys else np.zeros(0, np.int64)


def stratified_folds(pairs: Sequence[QueryProductPair], n_folds: int, seed: int) -> np.ndarray:
    """Fold id per row: rows grouped by label, dealt round-robin."""
    y = np.array([-1 if p.label is None else int(p.label) for p in pairs])
    order = _canonical_order(pairs, seed)
    order = order[np.argsort(y[order], kind="stable")]
    fold = np.empty(len(pairs), dtype=np.int64)
    fold[order] = np.arange(len(order)) % n_folds
    return fold


def holdout_split(pairs: Sequence[QueryProductPair], fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``(train, holdout)`` row indices; holdout has ``floor(n * fraction)`` rows.

    Labels play no part, so editing a holdout label cannot move rows into training.
    """
    if not 0 <= fraction < 1:
        raise ValueError("holdout fraction must be in [0, 1)")
    order = _canonical_order(pairs, seed)
    n_hold = int(np.floor(len(pairs) * fraction + 1e-9))
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


# ----------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    stage: str
    rows_in: int = 0
    scored: int = 0
    skipped: dict = field(default_factory=dict)  # reason -> count
    timings: dict = field(default_factory=dict)
    candidate_skips: dict = field(default_factory=dict)
    fit_seconds: dict = field(default_factory=dict)  # final candidate -> wall time
    digests: dict = field(default_factory=dict)

    def skip(self, reason: str, n: int = 1) -> None:
        if n:
            self.skipped[reason] = self.skipped.get(reason, 0) + n

    @property
    def reconciles(self) -> bool:
        return self.rows_in == self.scored + sum(self.skipped.values())

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["reconciles"] = self.reconciles
        return rec

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_record(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunManifest":
        rec = json.loads(Path(path).read_text(encoding="utf-8"))
        rec.pop("reconciles", None)
        return cls(**rec)


class _Timer:
    def __init__(self, manifest: RunManifest, name: str):
        self.manifest, self.name = manifest, name

    def __enter__(self):
        self.t = time.perf_counter()

    def __exit__(self, *exc):
        self.manifest.timings[self.name] = self.manifest.timings.get(self.name, 0.0) + time.perf_counter() - self.t


# ----------------------------------------------------------------------------
# training


_TASK_STATE: dict = {}


def _run_task(task):
    spec, rows, seed = task
    inputs, labels = _TASK_STATE["inputs"], _TASK_STATE["labels"]
    t = time.perf_counter()
    model = spec.train(inputs.subset(rows), labels[rows], seed)
    return model, time.perf_counter() - t


def _train_many(tasks, inputs: CandidateInputs, labels: np.ndarray, workers: int) -> list[tuple[Candidate, float]]:
    """Train independent candidates, in parallel when ``workers > 1``; ``(model, seconds)`` in task order."""
    _TASK_STATE["inputs"], _TASK_STATE["labels"] = inputs, labels
    try:
        if workers <= 1 or len(tasks) <= 1:
            return [_run_task(t) for t in tasks]
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks)), mp_context=ctx) as pool:
            return list(pool.map(_run_task, tasks))
    finally:
        _TASK_STATE.clear()


@dataclass
class ModelBundle:
    """Everything ``train_all`` produces."""

    config: PipelineConfig
    candidates: dict  # name -> Candidate, registry order
    ensemble: gbdt.TreeEnsemble
    oof: np.ndarray  # out-of-fold feature matrix of the training rows
    labels: np.ndarray
    locales: list
    manifest: RunManifest

    @property
    def names(self) -> list[str]:
        return list(self.candidates)

    def relation_of(self) -> dict[str, str]:
        return {s.name: s.relation for s in self.config.candidates if s.relation is not None and s.name in self.candidates}

    def costs(self) -> dict[str, float]:
        out = {}
        for name, cand in self.candidates.items():
            out[name] = float(self.config.selection_costs.get(name, cand.n_parameters))
        return out

    def refit(self, names: Sequence[str]) -> gbdt.TreeEnsemble:
        """Booster on the stored out-of-fold columns of ``names`` plus the locale columns."""
        unknown = [n for n in names if n not in self.candidates]
        if unknown:
            raise StageError("refit", f"unknown candidates {unknown}")
        groups = self.ensemble.schema.groups()
        cols = [c for n in names for c in groups[n]] + list(groups.get(gbdt.LOCALE_GROUP, []))
        schema = gbdt.FeatureSchema.build(list(names), self.locales)
        params = self.config.gbdt_params(self.labels)
        return gbdt.train(self.oof[:, cols], self.labels, params, schema)

    def save(self, out_dir, caches: Optional["Caches"] = None) -> dict[str, str]:
        """Checkpoints, booster, out-of-fold matrix and manifests; ``caches`` adds the fitted text and node state."""
        out = Path(out_dir)
        (out / "candidates").mkdir(parents=True, exist_ok=True)
        digests = {}
        for name, cand in self.candidates.items():
            path = out / "candidates" / f"{name}.ckpt"
            cand.save(path)
            digests[name] = cand.digest()
        self.ensemble.save(out / GBDT_FILE)
        digests["gbdt"] = hashlib.sha256(self.ensemble.dumps().encode()).hexdigest()
        np.save(out / OOF_FILE, self.oof)
        self.manifest.digests = digests
        meta = {
            "config": self.config.to_mapping(),
            "candidates": self.names,
            "locales": self.locales,
            "labels": self.labels.tolist(),
        }
        (out / MODEL_MANIFEST).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
        self.manifest.save(out / TRAIN_MANIFEST)
        if caches is not None:
            caches.save_fitted(out)
        return digests

    @classmethod
    def load(cls, model_dir) -> "ModelBundle":
        d = Path(model_dir)
        if not (d / MODEL_MANIFEST).is_file():
            raise DataError(f"no trained model in {d} (missing {MODEL_MANIFEST})")
        meta = json.loads((d / MODEL_MANIFEST).read_text(encoding="utf-8"))
        config = PipelineConfig.from_mapping(meta["config"])
        cands = {n: load_candidate(d / "candidates" / f"{n}.ckpt") for n in meta["candidates"]}
        ens = gbdt.TreeEnsemble.load(d / GBDT_FILE)
        oof = np.load(d / OOF_FILE)
        manifest = RunManifest.load(d / TRAIN_MANIFEST) if (d / TRAIN_MANIFEST).is_file() else RunManifest("train")
        return cls(config, cands, ens, oof, np.array(meta["labels"], dtype=np.int64), meta["locales"], manifest)


def _predict_all(candidates: Mapping[str, Candidate], inputs: CandidateInputs) -> dict[str, np.ndarray]:
    out = {}
    for name, cand in candidates.items():
        preds = np.full((len(inputs), N_LABELS), np.nan)
        for a in range(0, len(inputs), INFER_BATCH):
            rows = list(range(a, min(a + INFER_BATCH, len(inputs))))
            preds[a : a + len(rows)] = cand.predict_many(inputs.subset(rows))
        out[name] = preds
    return out


def train_all(pairs: Sequence[QueryProductPair], caches: Caches, config: PipelineConfig,
              workers: Optional[int] = None) -> ModelBundle:
    """Out-of-fold stacking, then the booster, then final candidates on all rows."""
    config.validate()
    workers = workers or config.workers
    manifest = RunManifest("train", rows_in=len(pairs))
    if len(pairs) < 2 * config.stacking_folds:
        raise StageError("train", f"need at least {2 * config.stacking_folds} rows, got {len(pairs)}")
    try:
        y = labels_array(pairs)
    except DataError as exc:
        raise StageError("train", str(exc)) from None
    with _Timer(manifest, "inputs"):
        inputs = caches.inputs(pairs)
    locales = sorted({p.locale for p in pairs})
    specs = list(config.candidates)
    if any(s.kind == "graph" for s in specs) and (inputs.subgraphs is None or inputs.node_features is None):
        raise StageError("train", "graph candidates configured but no subgraph cache / node features given")
    has_graph = np.array([s is not None for s in inputs.subgraphs]) if inputs.subgraphs is not None \
        else np.zeros(len(pairs), dtype=bool)
    for s in specs:
        if s.kind == "graph":
            manifest.candidate_skips[s.name] = {"no_subgraph": int((~has_graph).sum())}

    folds = stratified_folds(pairs, config.stacking_folds, config.seed)
    tasks, slots = [], []
    for f in range(config.stacking_folds):
        tr = np.flatnonzero(folds != f)
        for s in specs:
            rows = tr[has_graph[tr]] if s.kind == "graph" else tr
            tasks.append((s, rows, config.seed))
            slots.append((f, s.name))
    with _Timer(manifest, "oof_candidates"):
        try:
            fold_models = _train_many(tasks, inputs, y, workers)
        except (ValueError, RuntimeError) as exc:
            raise StageError("train", f"candidate training failed: {exc}") from None
    oof_preds = {s.name: np.full((len(pairs), N_LABELS), np.nan) for s in specs}
    with _Timer(manifest, "oof_predict"):
        for (f, name), (model, _) in zip(slots, fold_models):
            te = np.flatnonzero(folds == f)
            oof_preds[name][te] = _predict_all({name: model}, inputs.subset(te))[name]
    X, schema = gbdt.build_features(pairs, oof_preds, [s.name for s in specs], locales)
    with _Timer(manifest, "gbdt"):
        try:
            ensemble = gbdt.train(X, y, config.gbdt_params(y), schema)
        except ValueError as exc:
            raise StageError("train", f"booster training failed: {exc}") from None
    final_tasks = [(s, np.flatnonzero(has_graph) if s.kind == "graph" else np.arange(len(pairs)), config.seed)
                   for s in specs]
    with _Timer(manifest, "final_candidates"):
        try:
            finals = _train_many(final_tasks, inputs, y, workers)
        except (ValueError, RuntimeError) as exc:
            raise StageError("train", f"candidate training failed: {exc}") from None
    manifest.scored = len(pairs)
    manifest.fit_seconds = {s.name: sec for s, (_, sec) in zip(specs, finals)}
    bundle = ModelBundle(config, {s.name: m for s, (m, _) in zip(specs, finals)}, ensemble, X, y, locales, manifest)
    manifest.digests = {name: c.digest() for name, c in bundle.candidates.items()}
    manifest.digests["gbdt"] = hashlib.sha256(ensemble.dumps().encode()).hexdigest()
    return bundle


# ----------------------------------------------------------------------------
# importance and selection


def bundle_importance(bundle: ModelBundle, max_rows: int = 1000, background: int = 100,
                      seed: Optional[int] = None) -> GlobalImportance:
    """Group importance of the booster over a sample of its out-of-fold training rows."""
    seed = bundle.config.seed if seed is None else seed
    rows = sample_background(bundle.oof, max_rows, seed)
    bg = sample_background(bundle.oof, background, seed + 1)
    return global_importance(bundle.ensemble, rows, bg)


def select_candidates(bundle: ModelBundle, importance: GlobalImportance, budget: Optional[float] = None,
                      top: Optional[int] = None) -> SelectionState:
    """Rank-prefix selection over the bundle's candidates; no budget means unlimited."""
    shares = model_shares(importance)
    costs = bundle.costs()
    pool = [Entry(n, costs[n], shares.get(n, 0.0)) for n in bundle.names]
    limit = float(sum(costs.values())) if budget is None else float(budget)
    state = select_initial(pool, limit, bundle.config.selection_metric)
    if top is not None:
        if top < 0:
            raise ValueError("top must be >= 0")
        state.selected = state.selected[:top]
    return state


# ----------------------------------------------------------------------------
# inference


@dataclass
class InferenceResult:
    rows: list  # PredictionRow, one per input pair, input order
    manifest: RunManifest

    def probabilities(self) -> np.ndarray:
        return np.array([np.full(N_LABELS, np.nan) if r.is_error else r.distribution.as_array() for r in self.rows])

    @property
    def scored_mask(self) -> np.ndarray:
        return np.array([not r.is_error for r in self.rows], dtype=bool)

    def predicted(self) -> np.ndarray:
        return np.array([-1 if r.is_error else int(r.predicted) for r in self.rows], dtype=np.int64)


_INFER_STATE: dict = {}


def _infer_chunk(args):
    start, end = args
    st = _INFER_STATE
    inputs = st["inputs"].subset(range(start, end))
    return _score_batch(inputs, st["candidates"], st["ensemble"], st["locales"], st["policy"])


def _score_batch(inputs: CandidateInputs, candidates: Mapping[str, Candidate], ensemble: gbdt.TreeEnsemble,
                 locales: Sequence[str], policy: str):
    n = len(inputs)
    preds = {}
    failed = {}
    for name, cand in candidates.items():
        try:
            p = cand.predict_many(inputs)
        except Exception as exc:  # candidate failures are isolated per candidate
            failed[name] = repr(exc)
            p = np.full((n, N_LABELS), np.nan)
        preds[name] = p
    avail = np.stack([~np.isnan(preds[nm]).any(axis=1) for nm in candidates], axis=1) if candidates \
        else np.zeros((n, 0), dtype=bool)
    X, _ = gbdt.build_features(inputs.pairs, preds, list(candidates), locales)
    out = np.full((n, N_LABELS), np.nan)
    if policy == RELIABILITY:
        ok = avail.all(axis=1)
    else:
        ok = avail.any(axis=1)
    if ok.any():
        out[ok] = ensemble.predict_proba(X[ok])
    reasons = []
    for i in range(n):
        if ok[i]:
            reasons.append(None)
        elif policy == RELIABILITY:
            reasons.append("missing_candidate_input")
        else:
            reasons.append("no_candidate_available")
    return out, reasons, failed


def infer_batch(pairs: Sequence[QueryProductPair], caches: Caches, bundle: ModelBundle,
                selection: Optional[SelectionState] = None, policy: Optional[str] = None,
                workers: Optional[int] = None, ensemble: Optional[gbdt.TreeEnsemble] = None) -> InferenceResult:
    """Score every pair; failures become error rows, never dropped rows.

    With a selection, only the selected candidates run and the booster is
    refit on their out-of-fold columns unless ``ensemble`` is supplied.
    """
    policy = (policy or bundle.config.policy).lower()
    if policy not in POLICIES:
        raise ConfigError(f"policy must be one of {POLICIES}, got {policy!r}")
    workers = workers or bundle.config.workers
    manifest = RunManifest("infer", rows_in=len(pairs))
    names = bundle.names if selection is None else [n for n in selection.names]
    missing = [n for n in names if n not in bundle.candidates]
    if missing:
        raise StageError("infer", f"selected candidates without checkpoints: {missing}")
    if ensemble is None:
        if names == bundle.names:
            ensemble = bundle.ensemble
        elif names:
            with _Timer(manifest, "refit"):
                ensemble = bundle.refit(names)
    candidates = {n: bundle.candidates[n] for n in names}
    if not candidates:
        rows = [PredictionRow(i, None, None) for i in range(len(pairs))]
        manifest.skip("no_candidate_selected", len(pairs))
        return InferenceResult(rows, manifest)
    with _Timer(manifest, "inputs"):
        inputs = caches.inputs(pairs)
    chunks = [(a, min(a + INFER_BATCH, len(pairs))) for a in range(0, len(pairs), INFER_BATCH)]
    _INFER_STATE.update(inputs=inputs, candidates=candidates, ensemble=ensemble, locales=bundle.locales,
                        policy=policy)
    try:
        with _Timer(manifest, "score"):
            if workers > 1 and len(chunks) > 1:
                ctx = multiprocessing.get_context("fork")
                with ProcessPoolExecutor(max_workers=min(workers, len(chunks)), mp_context=ctx) as pool:
                    results = list(pool.map(_infer_chunk, chunks))
            else:
                results = [_infer_chunk(c) for c in chunks]
    finally:
        _INFER_STATE.clear()
    rows = []
    for (a, _b), (probs, reasons, failed) in zip(chunks, results):
        for name, err in failed.items():
            log.warning("candidate %s failed on batch starting at %d: %s", name, a, err)
            manifest.candidate_skips.setdefault(name, {}).setdefault("failed_batches", 0)
            manifest.candidate_skips[name]["failed_batches"] += 1
        for j, reason in enumerate(reasons):
            if reason is None:
                dist = LabelDistribution.from_array(_renormalize(probs[j]))
                rows.append(PredictionRow(a + j, dist, dist.argmax))
                manifest.scored += 1
            else:
                rows.append(PredictionRow(a + j, None, None))
                manifest.skip(reason)
    manifest.digests["predictions"] = predictions_digest(rows)
    return InferenceResult(rows, manifest)


def _renormalize(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 0.0, 1.0)
    return p / p.sum()


def predictions_digest(rows: Sequence[PredictionRow]) -> str:
    h = hashlib.sha256()
    for r in rows:
        if r.is_error:
            h.update(f"{r.pair_index}\terror\n".encode())
        else:
            h.update((f"{r.pair_index}\t" + "\t".join(repr(float(x)) for x in r.distribution.probs) + "\n").encode())
    return h.hexdigest()


def evaluate(pairs: Sequence[QueryProductPair], result: InferenceResult) -> Optional[MetricsReport]:
    """Metrics over the scored rows; None when nothing was scored."""
    mask = result.scored_mask
    if not mask.any():
        return None
    y = labels_array([p for p, m in zip(pairs, mask) if m])
    return score(y, result.predicted()[mask])


def candidate_metrics(pairs: Sequence[QueryProductPair], caches: Caches, bundle: ModelBundle) -> dict[str, MetricsReport]:
    """Each candidate alone, argmax of its own distribution, over the rows it can score."""
    inputs = caches.inputs(pairs)
    y = labels_array(pairs)
    out = {}
    for name, preds in _predict_all(bundle.candidates, inputs).items():
        ok = ~np.isnan(preds).any(axis=1)
        if ok.any():
            out[name] = score(y[ok], preds[ok].argmax(axis=1))
    return out


# ----------------------------------------------------------------------------
# cross-validation


@dataclass
class CrossValidation:
    folds: list  # MetricsReport per fold
    test: Optional[MetricsReport]
    holdout_rows: np.ndarray
    fold_of: np.ndarray  # fold id per non-holdout row, aligned with ``train_rows``
    train_rows: np.ndarray
    warnings: list

    def summary(self) -> dict:
        def rec(r):
            return None if r is None else {k: getattr(r, k) for k in ("accuracy", "macro_f1", "weighted_f1")}
        return {"folds": [rec(r) for r in self.folds], "test": rec(self.test), "warnings": self.warnings}


def cross_validate(pairs: Sequence[QueryProductPair], graphs: Optional[GraphSet], config: PipelineConfig,
                   folds: int = 5, holdout: float = 0.1, workers: Optional[int] = None) -> CrossValidation:
    """Holdout split, then ``folds``-fold train/validation runs on the rest, then a final test run.

    Caches are rebuilt from each training split so no statistic sees
    validation or holdout rows.
    """
    if len(pairs) < 2 * folds:
        raise ValueError(f"need at least {2 * folds} rows for {folds} folds")
    train_rows, hold_rows = holdout_split(pairs, holdout, config.seed)
    rest = [pairs[i] for i in train_rows]
    fold_of = stratified_folds(rest, folds, config.seed)
    reports, warnings = [], []
    for f in range(folds):
        tr = [rest[i] for i in np.flatnonzero(fold_of != f)]
        va = [rest[i] for i in np.flatnonzero(fold_of == f)]
        missing = sorted(set(range(N_LABELS)) - {int(p.label) for p in tr})
        if missing:
            msg = f"fold {f}: classes {missing} absent from training rows; their weight stays 1"
            log.warning(msg)
            warnings.append(msg)
        reports.append(_fit_and_score(tr, va, graphs, config, workers))
    test = None
    if len(hold_rows):
        test = _fit_and_score(rest, [pairs[i] for i in hold_rows], graphs, config, workers)
    return CrossValidation(reports, test, hold_rows, fold_of, train_rows, warnings)


def _fit_and_score(train_pairs, eval_pairs, graphs, config, workers) -> Optional[MetricsReport]:
    caches = prepare_caches(train_pairs, graphs, config, workers)
    bundle = train_all(train_pairs, caches, config, workers)
    eval_caches = extend_caches(caches, eval_pairs, graphs, config, workers)
    return evaluate(eval_pairs, infer_batch(eval_pairs, eval_caches, bundle, workers=workers))


def extend_caches(caches: Caches, pairs: Sequence[QueryProductPair], graphs: Optional[GraphSet],
                  config: PipelineConfig, workers: Optional[int] = None) -> Caches:
    """Caches for new pairs reusing fitted statistics: the denoiser and node table stay as fitted."""
    tokens = dict(caches.tokens)
    for p in pairs:
        if p.product_id not in tokens:
            tokens[p.product_id] = caches.denoiser.product_tokens(p)
    subs = None
    if graphs is not None:
        fresh = build_cache(pairs, graphs, config.hops, config.cap, workers or config.workers)
        merged = {} if caches.subgraphs is None else dict(caches.subgraphs.items())
        merged.update(fresh.items())
        subs = SubgraphCache(merged)
    elif caches.subgraphs is not None:
        subs = caches.subgraphs
    return Caches(caches.denoiser, tokens, subs, caches.node_features)
