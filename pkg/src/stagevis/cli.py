"""Command-line entry point: extract, ingest, index, run, evaluate, report."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import pickle
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from stagevis import __version__
from stagevis.corpus import (
    ChunkConfig,
    CorpusSnapshot,
    atomic_write_text,
    ingest,
    load_snapshot,
    read_corpus,
    save_snapshot,
    write_corpus,
)
from stagevis.errors import ConfigError, IngestError, InputDecodeError, StageError, StagevisError, UnknownStrategy
from stagevis.evaluate import Bindings, PipelineConfig, Query, citation_provenance, run_campaign, run_pipeline
from stagevis.generate import MockGenerator, ServiceGenerator
from stagevis.index import BM25Params, build_field_indexes
from stagevis.optimize import (
    AppendMarkerRewriter,
    IdentityRewriter,
    OptimizationScope,
    ServiceRewriter,
    autogeo_strategy,
    strategy_key,
)
from stagevis.report import GROUPINGS, build_report, read_records, write_report
from stagevis.rerank import OverlapScorer, ServiceScorer
from stagevis.webdoc import parse_html

log = logging.getLogger("stagevis")

ENV_URLS = {
    "reranker": "STAGEVIS_RERANKER_URL",
    "generator": "STAGEVIS_GENERATOR_URL",
    "optimizer": "STAGEVIS_OPTIMIZER_URL",
}
RESULTS_FILE = "results.jsonl"
CONFIG_FILE = "config.json"

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_MISSING = 4
EXIT_STAGE = 5


@dataclass
class RunConfig:
    corpus: str = ""
    queries: str = ""
    out: str = ""
    chunk_size: int = 256
    chunk_overlap: int = 64
    k_retrieve: int = 100
    k_rerank: int = 10
    metric_k_retrieval: int = 20
    rrf_kappa: float = 60.0
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    include_jsonld: bool = False
    provenance_threshold: float = 0.8
    strategies: list[str] = field(default_factory=lambda: ["identity"])
    scopes: list[str] = field(default_factory=lambda: ["both"])
    reranker: str = "builtin"
    generator: str = "mock"
    optimizer: str = "identity"
    backend_label: str = ""
    autogeo_rules: str = ""
    generation_delta: str = "cocited"
    mock_max_sources: int = 5
    seed: int = 0
    parallelism: int = 1

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        return cls(**data)

    def dumps(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


# -- argument parsing ----------------------------------------------------

_CFG_FLAGS = {
    "corpus": "corpus", "queries": "queries", "out": "out", "seed": "seed",
    "chunk_size": "chunk_size", "chunk_overlap": "chunk_overlap",
    "k_retrieve": "k_retrieve", "k_rerank": "k_rerank", "metric_k_retrieval": "metric_k_retrieval",
    "rrf_kappa": "rrf_kappa", "bm25_k1": "bm25_k1", "bm25_b": "bm25_b", "include_jsonld": "include_jsonld",
    "provenance_threshold": "provenance_threshold",
    "strategy": "strategies", "scope": "scopes", "reranker": "reranker", "generator": "generator",
    "optimizer": "optimizer", "backend_label": "backend_label", "autogeo_rules": "autogeo_rules",
    "generation_delta": "generation_delta", "mock_max_sources": "mock_max_sources",
    "parallelism": "parallelism",
}


def _add_index_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--chunk-size", type=int, help="passage length in tokens (default 256)")
    p.add_argument("--chunk-overlap", type=int, help="overlap between passages in tokens (default 64)")
    p.add_argument("--bm25-k1", type=float, help="Okapi k1 (default 1.2)")
    p.add_argument("--bm25-b", type=float, help="Okapi b (default 0.75)")
    p.add_argument("--rrf-kappa", type=float, help="reciprocal rank fusion constant (default 60)")


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    _add_index_flags(p)
    p.add_argument("--k-retrieve", type=int, help="passages kept after retrieval (default 100)")
    p.add_argument("--k-rerank", type=int, help="passages kept after reranking (default 10)")
    p.add_argument("--include-jsonld", action="store_true", default=None, help="show JSON-LD to the generator")
    p.add_argument("--reranker", help="'builtin', an http(s) URL, or 'url' to read $STAGEVIS_RERANKER_URL")
    p.add_argument("--generator", help="'mock', an http(s) URL, or 'url' to read $STAGEVIS_GENERATOR_URL")
    p.add_argument("--mock-max-sources", type=int, help="candidates the mock generator may cite (default 5)")
    p.add_argument("--provenance-threshold", type=float, help="min similarity to attribute a quote to a region (default 0.8)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stagevis", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="HTML directory -> corpus file")
    p.add_argument("--html-dir", required=True)
    p.add_argument("--out", required=True, help="corpus file to write (JSON lines)")

    p = sub.add_parser("ingest", help="corpus file -> snapshot directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--chunk-overlap", type=int)

    p = sub.add_parser("index", help="corpus -> snapshot + field indexes")
    p.add_argument("--corpus", required=True, help="corpus file or snapshot directory")
    p.add_argument("--out", required=True)
    _add_index_flags(p)

    p = sub.add_parser("run", help="run one query through the pipeline and dump the trace")
    p.add_argument("--corpus", required=True, help="corpus file or snapshot directory")
    p.add_argument("--query", required=True)
    p.add_argument("--query-id", default="q")
    p.add_argument("--out", help="trace file (default: stdout)")
    _add_pipeline_flags(p)

    p = sub.add_parser("evaluate", help="baseline vs optimized campaign over strategies x scopes")
    p.add_argument("--config", help="run manifest to start from; explicit flags override it")
    p.add_argument("--corpus", help="corpus file or snapshot directory")
    p.add_argument("--queries", help="query file (JSON lines: query_id, text, domain)")
    p.add_argument("--out", help="run directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--strategy", action="append", help="strategy name (repeatable)")
    p.add_argument("--scope", action="append", choices=[s.value for s in OptimizationScope], help="repeatable")
    p.add_argument("--metric-k-retrieval", type=int, help="k for retrieval hit rate (default 20)")
    p.add_argument("--optimizer", help="'identity', 'append-marker', an http(s) URL, or 'url' for $STAGEVIS_OPTIMIZER_URL")
    p.add_argument("--backend-label", help="label recorded for the optimizer backend")
    p.add_argument("--autogeo-rules", help="text file, one preference rule per line; enables 'autogeo'")
    p.add_argument("--generation-delta", choices=["cocited", "all"])
    p.add_argument("--parallelism", type=int)
    p.add_argument("--no-figures", action="store_true")
    _add_pipeline_flags(p)

    p = sub.add_parser("report", help="results file -> tables, summary and figures")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--group-by", choices=sorted(GROUPINGS), default="strategy")
    p.add_argument("--metric-k-retrieval", type=int, default=20)
    p.add_argument("--k-rerank", type=int, default=10)
    p.add_argument("--generation-delta", choices=["cocited", "all"], default="cocited")
    p.add_argument("--delimiter", choices=["comma", "tab"], default="comma")
    p.add_argument("--no-figures", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base or RunConfig())
    for flag, attr in _CFG_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, value)
    return cfg


# -- wiring --------------------------------------------------------------


def _endpoint(value: str, role: str) -> str:
    if value == "url":
        env = ENV_URLS[role]
        url = os.environ.get(env)
        if not url:
            raise ConfigError(f"--{role} url requires ${env}")
        return url
    return value


def _is_url(value: str) -> bool:
    return value == "url" or value.startswith(("http://", "https://"))


def make_bindings(cfg: RunConfig) -> Bindings:
    if cfg.reranker == "builtin":
        scorer = OverlapScorer()
    elif _is_url(cfg.reranker):
        scorer = ServiceScorer(_endpoint(cfg.reranker, "reranker"), parallelism=max(1, cfg.parallelism))
    else:
        raise ConfigError(f"unknown reranker {cfg.reranker!r}")
    if cfg.generator == "mock":
        generator = MockGenerator(max_sources=cfg.mock_max_sources)
    elif _is_url(cfg.generator):
        generator = ServiceGenerator(_endpoint(cfg.generator, "generator"))
    else:
        raise ConfigError(f"unknown generator {cfg.generator!r}")
    return Bindings(scorer, generator)


def make_rewriter(cfg: RunConfig, log_dir: Path | None = None):
    if cfg.optimizer == "identity":
        return IdentityRewriter()
    if cfg.optimizer == "append-marker":
        return AppendMarkerRewriter()
    if _is_url(cfg.optimizer):
        return ServiceRewriter(_endpoint(cfg.optimizer, "optimizer"), log_dir=log_dir)
    raise ConfigError(f"unknown optimizer {cfg.optimizer!r}")


def load_corpus(path: str | Path, chunk: ChunkConfig) -> CorpusSnapshot:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus not found: {path}")
    if path.is_dir():
        snap = load_snapshot(path)
        if snap.chunk != chunk:
            log.info("snapshot chunking %s differs from requested %s; re-chunking", snap.chunk, chunk)
            snap = ingest(snap.documents.values(), chunk)
        return snap
    return ingest(read_corpus(path), chunk)


def read_queries(path: str | Path) -> list[Query]:
    queries, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                q = Query(str(rec["query_id"]), str(rec["text"]), str(rec.get("domain") or ""))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise IngestError(f"{path}:{lineno}: bad query record ({exc})") from None
            if q.query_id in seen:
                raise IngestError(f"{path}:{lineno}: duplicate query_id {q.query_id!r}")
            seen.add(q.query_id)
            queries.append(q)
    return queries


def _params(cfg: RunConfig) -> BM25Params:
    return BM25Params(k1=cfg.bm25_k1, b=cfg.bm25_b, kappa=cfg.rrf_kappa)


def _pipeline(cfg: RunConfig) -> PipelineConfig:
    return PipelineConfig(
        k_retrieve=cfg.k_retrieve, k_rerank=cfg.k_rerank, include_jsonld=cfg.include_jsonld,
        provenance_threshold=cfg.provenance_threshold,
    )


# -- commands ------------------------------------------------------------


def cmd_extract(args) -> int:
    root = Path(args.html_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"not a directory: {root}")
    docs, bad = [], 0
    for path in sorted(p for p in root.rglob("*") if p.suffix.lower() in (".html", ".htm") and p.is_file()):
        doc_id = path.relative_to(root).with_suffix("").as_posix()
        try:
            docs.append(parse_html(path.read_bytes(), doc_id))
        except InputDecodeError as exc:
            bad += 1
            log.warning("skipping %s: %s", path, exc)
    write_corpus(args.out, docs)
    print(f"extracted {len(docs)} documents to {args.out}" + (f" ({bad} undecodable skipped)" if bad else ""))
    return 0


def cmd_ingest(args) -> int:
    cfg = resolve_config(args)
    chunk = ChunkConfig(cfg.chunk_size, cfg.chunk_overlap)
    snap = ingest(read_corpus(args.corpus), chunk)
    save_snapshot(snap, args.out)
    print(f"snapshot {snap.snapshot_id}: {len(snap.documents)} documents, {len(snap.passages)} passages -> {args.out}")
    return 0


def cmd_index(args) -> int:
    cfg = resolve_config(args)
    snap = load_corpus(args.corpus, ChunkConfig(cfg.chunk_size, cfg.chunk_overlap))
    idx = build_field_indexes(snap, _params(cfg))
    out = Path(args.out)
    save_snapshot(snap, out)
    with open(out / "index.pkl", "wb") as fh:
        pickle.dump(idx, fh, protocol=pickle.HIGHEST_PROTOCOL)
    stats = {"snapshot_id": idx.snapshot_id, "params": dataclasses.asdict(idx.params), "fields": idx.stats()}
    atomic_write_text(out / "index_stats.json", json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(f"indexed snapshot {snap.snapshot_id} ({len(snap.passages)} passages) -> {out}")
    return 0


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    snap = load_corpus(args.corpus, ChunkConfig(cfg.chunk_size, cfg.chunk_overlap))
    idx = build_field_indexes(snap, _params(cfg))
    pipeline = _pipeline(cfg)
    trace = run_pipeline(args.query, snap, idx, make_bindings(cfg), pipeline, args.query_id)
    out = trace.to_dict()
    out["provenance"] = [
        {"doc_id": doc_id, **dataclasses.asdict(p)}
        for doc_id in dict.fromkeys(c.doc_id for c in trace.response.citations)
        for p in citation_provenance(trace.response, trace.context, snap.documents[doc_id], pipeline.provenance_threshold)
    ]
    text = json.dumps(out, indent=2, ensure_ascii=False) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_evaluate(args) -> int:
    base = RunConfig.load(args.config) if args.config else None
    cfg = resolve_config(args, base)
    for name, value in (("--corpus", cfg.corpus), ("--queries", cfg.queries), ("--out", cfg.out)):
        if not value:
            raise ConfigError(f"evaluate needs {name} (flag or config)")
    if cfg.parallelism < 1:
        raise ConfigError("--parallelism must be >= 1")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    strategies = list(cfg.strategies)
    if cfg.autogeo_rules:
        rules = autogeo_strategy(Path(cfg.autogeo_rules).read_text(encoding="utf-8").splitlines())
        strategies = [rules if strategy_key(s) == "autogeo" else s for s in strategies]
    atomic_write_text(out / CONFIG_FILE, cfg.dumps())

    snap = load_corpus(cfg.corpus, ChunkConfig(cfg.chunk_size, cfg.chunk_overlap))
    idx = build_field_indexes(snap, _params(cfg))
    queries = read_queries(cfg.queries)
    result = run_campaign(
        queries, snap, idx, strategies, cfg.scopes,
        bindings=make_bindings(cfg),
        rewriter=make_rewriter(cfg, log_dir=out),
        config=_pipeline(cfg),
        seed=cfg.seed,
        parallelism=cfg.parallelism,
        backend_label=cfg.backend_label or cfg.optimizer,
    )
    atomic_write_text(
        out / RESULTS_FILE,
        "".join(json.dumps(r.to_dict(), sort_keys=True, ensure_ascii=False) + "\n" for r in result.records),
    )
    atomic_write_text(out / "skipped.jsonl", "".join(json.dumps(s, sort_keys=True) + "\n" for s in result.skipped))
    report = build_report(
        result.records, "strategy", cfg.metric_k_retrieval, cfg.k_rerank, cfg.generation_delta, len(result.skipped)
    )
    write_report(report, out / "report", figures=not args.no_figures)
    sys.stdout.write(report.summary)
    print(f"wrote {len(result.records)} records to {out / RESULTS_FILE}")
    return 0


def cmd_report(args) -> int:
    records = read_records(args.results)
    report = build_report(records, args.group_by, args.metric_k_retrieval, args.k_rerank, args.generation_delta)
    write_report(report, args.out, "\t" if args.delimiter == "tab" else ",", figures=not args.no_figures)
    sys.stdout.write(report.summary)
    return 0


COMMANDS = {
    "extract": cmd_extract,
    "ingest": cmd_ingest,
    "index": cmd_index,
    "run": cmd_run,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def execute(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UnknownStrategy) as exc:
        print(f"stagevis {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestError, InputDecodeError) as exc:
        print(f"stagevis {args.command}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"stagevis {args.command}: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except StageError as exc:
        print(f"stagevis {args.command}: {exc.stage} stage failed: {exc.message}", file=sys.stderr)
        return EXIT_STAGE
    except StagevisError as exc:
        print(f"stagevis {args.command}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(execute())


if __name__ == "__main__":
    main()
