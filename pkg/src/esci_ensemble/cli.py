"""Command-line entry point: one subcommand per stage.

Values come from the ``--config`` YAML file first, then from flags, which
override it. Exit codes: 0 success, 2 config error, 3 data error, 4 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import pipeline as pl
from .candidates import NodeFeatureTable
from .core import DataError, read_pairs, read_predictions, write_predictions
from .denoiser import save_token_cache
from .evaluation import MetricsReport, score
from .graphstore import SubgraphCache, build_cache, load_edges
from .selection import Entry, SelectionState, audit, select_continuous
from .shapley import model_shares, relation_shares, write_report
from .synth import SynthConfig, describe, generate, write_dataset

log = logging.getLogger("esci_ensemble")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_STAGE = 0, 2, 3, 4


# ----------------------------------------------------------------------------
# config plumbing


def _read_mapping(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise pl.ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise pl.ConfigError(f"{p}: invalid YAML: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise pl.ConfigError(f"{p}: top level must be a mapping")
    return data


def _set(data: dict, dotted: str, value) -> None:
    if value is None:
        return
    *head, last = dotted.split(".")
    node = data
    for k in head:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[last] = value


def _pipeline_config(args) -> pl.PipelineConfig:
    data = _read_mapping(args.config)
    for dotted, attr in (("seed", "seed"), ("workers", "workers"), ("policy", "policy"),
                         ("graph.k", "k"), ("graph.cap", "cap"), ("selection.budget", "budget"),
                         ("selection.top", "top")):
        _set(data, dotted, getattr(args, attr, None))
    return pl.PipelineConfig.from_mapping(data)


def _need(path: Optional[str], what: str) -> Path:
    if path is None:
        raise pl.ConfigError(f"missing required input: --{what}")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    data = dict(_read_mapping(args.config).get("synth") or {})
    _set(data, "n_pairs", args.n_pairs)
    _set(data, "seed", args.seed)
    try:
        cfg = SynthConfig.from_mapping(data)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise pl.ConfigError(f"synth: {exc}") from None
    ds = generate(cfg)
    paths = write_dataset(ds, args.out)
    d = describe(ds.pairs, ds.edges)
    print(f"pairs\t{len(ds.pairs)}\t{paths['pairs']}")
    print(f"edges\t{len(ds.edges)}\t{paths['edges']}")
    for s, pct in d["shares_pct"].items():
        print(f"share\t{s}\t{pct:.3f}")
    return EXIT_OK


def cmd_build_cache(args) -> int:
    cfg = _pipeline_config(args)
    pairs = read_pairs(_need(args.pairs, "pairs"))
    graphs = load_edges(_need(args.edges, "edges"))
    cache = build_cache(pairs, graphs, cfg.hops, cfg.cap, cfg.workers)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    cache.save(args.out)
    print(f"subgraphs\t{len(cache)}\t{args.out}")
    return EXIT_OK


def cmd_denoise(args) -> int:
    cfg = _pipeline_config(args)
    pairs = read_pairs(_need(args.pairs, "pairs"))
    _, tokens = pl.fit_denoiser(pairs, cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_token_cache(tokens, args.out)
    print(f"products\t{len(tokens)}\t{args.out}")
    return EXIT_OK


def _caches_for(pairs, graphs, cfg, cache_path: Optional[str], fitted: Optional[pl.Caches] = None) -> pl.Caches:
    """Fitted caches for ``pairs``; a given subgraph cache replaces extraction."""
    if fitted is None:
        caches = pl.prepare_caches(pairs, None, cfg)
        if graphs is not None:
            caches.node_features = NodeFeatureTable.build(graphs, pairs, cfg.text_dim)
    else:
        caches = pl.extend_caches(fitted, pairs, None, cfg)
    if cache_path is not None:
        caches.subgraphs = SubgraphCache.load(_need(cache_path, "cache"))
    elif graphs is not None:
        caches.subgraphs = build_cache(pairs, graphs, cfg.hops, cfg.cap, cfg.workers)
    return caches


def cmd_train(args) -> int:
    cfg = _pipeline_config(args)
    pairs = read_pairs(_need(args.pairs, "pairs"))
    graphs = load_edges(_need(args.edges, "edges")) if args.edges else None
    caches = _caches_for(pairs, graphs, cfg, args.cache)
    bundle = pl.train_all(pairs, caches, cfg)
    digests = bundle.save(args.out, caches)
    for name in bundle.names:
        print(f"candidate\t{name}\t{digests[name][:12]}")
    print(f"gbdt\t{len(bundle.ensemble.trees)}\t{digests['gbdt'][:12]}")
    return EXIT_OK


def _load_model(path: Optional[str]) -> pl.ModelBundle:
    return pl.ModelBundle.load(_need(path, "model"))


def cmd_explain(args) -> int:
    bundle = _load_model(args.model)
    imp = pl.bundle_importance(bundle, max_rows=args.rows)
    ranked = imp.ranked()
    if args.top_groups is not None:
        if args.top_groups < 0:
            raise pl.ConfigError("--top-groups must be >= 0")
        ranked = ranked[: args.top_groups]
    lines = ["group\tshare"] + [f"{g}\t{s:.6f}" for g, s in ranked]
    print("\n".join(lines))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_select(args) -> int:
    cfg = _pipeline_config(args)
    bundle = _load_model(args.model)
    imp = pl.bundle_importance(bundle)
    if args.offer:
        if args.state is None:
            raise pl.ConfigError("--offer needs --state")
        state = SelectionState.load(_need(args.state, "state"))
        if args.offer not in bundle.candidates:
            raise DataError(f"offered candidate {args.offer!r} has no checkpoint in {args.model}")
        shares = model_shares(imp)
        state = select_continuous(state, Entry(args.offer, bundle.costs()[args.offer], shares.get(args.offer, 0.0)))
    else:
        try:
            state = pl.select_candidates(bundle, imp, cfg.selection_budget, cfg.selection_top)
        except ValueError as exc:
            raise pl.ConfigError(str(exc)) from None
    rep = audit(state)
    print("selected\t" + ",".join(state.names))
    for k, v in rep.to_record().items():
        print(f"{k}\t{v}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        state.save(args.out)
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _pipeline_config(args)
    bundle = _load_model(args.model)
    fitted = pl.Caches.load_fitted(args.model)
    pairs = read_pairs(_need(args.pairs, "pairs"))
    graphs = load_edges(_need(args.edges, "edges")) if args.edges else None
    caches = _caches_for(pairs, graphs, bundle.config, args.cache, fitted)
    selection = SelectionState.load(_need(args.selection, "selection")) if args.selection else None
    res = pl.infer_batch(pairs, caches, bundle, selection, policy=args.policy or cfg.policy, workers=cfg.workers)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_predictions(res.rows, args.out)
    manifest_path = args.manifest or f"{args.out}.manifest.json"
    res.manifest.save(manifest_path)
    print(f"scored\t{res.manifest.scored}/{res.manifest.rows_in}")
    for reason, n in sorted(res.manifest.skipped.items()):
        print(f"skipped\t{reason}\t{n}")
    print(f"digest\t{res.manifest.digests['predictions']}")
    if not res.manifest.reconciles:
        raise pl.StageError("infer", "manifest counts do not reconcile")
    return EXIT_OK


def _metrics_record(rep: Optional[MetricsReport], n_rows: int, n_scored: int) -> dict:
    rec = {"rows": n_rows, "scored": n_scored}
    if rep is not None:
        rec.update(accuracy=rep.accuracy, macro_f1=rep.macro_f1, weighted_f1=rep.weighted_f1,
                   per_class={k: vars(v) for k, v in rep.per_class.items()})
    return rec


def cmd_eval(args) -> int:
    pairs = read_pairs(_need(args.pairs, "pairs"))
    rows = read_predictions(_need(args.predictions, "predictions"))
    if len(rows) != len(pairs):
        raise DataError(f"{len(rows)} prediction rows for {len(pairs)} pairs")
    if any(not 0 <= r.pair_index < len(pairs) for r in rows):
        raise DataError("prediction pair_index outside the pairs file")
    ok = [r for r in rows if not r.is_error]
    truth = [pairs[r.pair_index].label for r in ok]
    if any(t is None for t in truth):
        raise DataError("evaluation pairs must carry labels")
    rep = score([int(t) for t in truth], [int(r.predicted) for r in ok]) if ok else None
    rec = _metrics_record(rep, len(rows), len(ok))
    for k in ("rows", "scored", "accuracy", "macro_f1", "weighted_f1"):
        if k in rec:
            v = rec[k]
            print(f"{k}\t{v:.6f}" if isinstance(v, float) else f"{k}\t{v}")
    if args.out:
        _write_json(args.out, rec)
    return EXIT_OK


def _file_size(path: Path) -> int:
    return path.stat().st_size if path.is_file() else 0


def cmd_report(args) -> int:
    model_dir = _need(args.model, "model")
    bundle = pl.ModelBundle.load(model_dir)
    imp = pl.bundle_importance(bundle)
    models = model_shares(imp)
    relations = relation_shares(imp, bundle.relation_of())
    per_sample = {n: float("nan") for n in bundle.names}
    if args.pairs:
        pairs = read_pairs(_need(args.pairs, "pairs"))
        graphs = load_edges(_need(args.edges, "edges")) if args.edges else None
        caches = _caches_for(pairs, graphs, bundle.config, args.cache, pl.Caches.load_fitted(model_dir))
        inputs = caches.inputs(pairs)
        for name, cand in bundle.candidates.items():
            t = time.perf_counter()
            cand.predict_many(inputs)
            per_sample[name] = (time.perf_counter() - t) / max(1, len(pairs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "contributions.tsv", models, relations)
    header = ["model", "parameters", "fit_seconds", "infer_seconds_per_sample", "checkpoint_bytes"]
    lines = ["\t".join(header)]
    for name, cand in bundle.candidates.items():
        lines.append("\t".join([
            name, str(cand.n_parameters), f"{bundle.manifest.fit_seconds.get(name, float('nan')):.3f}",
            f"{per_sample[name]:.6g}", str(_file_size(model_dir / "candidates" / f"{name}.ckpt")),
        ]))
    (out / "costs.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print((out / "contributions.tsv").read_text(encoding="utf-8"), end="")
    print("\n".join(lines))
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esci-ensemble", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    def stage(name: str, help_: str, fn):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, help="parallel processes for stages that support it")
        p.set_defaults(func=fn)
        return p

    p = stage("synth", "generate a synthetic dataset", cmd_synth)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-pairs", type=int)

    p = stage("build-cache", "extract k-hop subgraphs for every pair", cmd_build_cache)
    p.add_argument("--pairs", required=True)
    p.add_argument("--edges", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--cap", type=int)

    p = stage("denoise", "write denoised product tokens", cmd_denoise)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)

    p = stage("train", "train candidates and the booster", cmd_train)
    p.add_argument("--pairs", required=True)
    p.add_argument("--edges")
    p.add_argument("--cache", help="prebuilt subgraph cache instead of extraction")
    p.add_argument("--out", required=True, help="model directory")
    p.add_argument("--k", type=int)
    p.add_argument("--cap", type=int)

    p = stage("explain", "global importance per feature group", cmd_explain)
    p.add_argument("--model", required=True)
    p.add_argument("--top-groups", type=int)
    p.add_argument("--rows", type=int, default=1000, help="rows sampled for attribution")
    p.add_argument("--out")

    p = stage("select", "budgeted candidate selection", cmd_select)
    p.add_argument("--model", required=True)
    p.add_argument("--budget", type=float)
    p.add_argument("--top", type=int)
    p.add_argument("--state", help="existing selection state, for --offer")
    p.add_argument("--offer", help="offer one candidate to an existing selection")
    p.add_argument("--out")

    p = stage("infer", "score pairs", cmd_infer)
    p.add_argument("--model", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--edges")
    p.add_argument("--cache")
    p.add_argument("--selection")
    p.add_argument("--policy", choices=pl.POLICIES)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest")

    p = stage("eval", "metrics for a predictions file", cmd_eval)
    p.add_argument("--pairs", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out")

    p = stage("report", "contribution tables and cost summary", cmd_report)
    p.add_argument("--model", required=True)
    p.add_argument("--pairs", help="pairs used to time inference")
    p.add_argument("--edges")
    p.add_argument("--cache")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except pl.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except pl.StageError as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (ValueError, RuntimeError, OSError, np.linalg.LinAlgError) as exc:
        print(f"stage error: [{args.command}] {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
