"""Pipeline composition, the baseline/optimized protocol, and visibility metrics."""

from __future__ import annotations

import hashlib
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence

from rapidfuzz.distance import Levenshtein

from stagevis.corpus import CorpusSnapshot, replace_document
from stagevis.errors import ConfigError, StageError
from stagevis.generate import (
    GeneratedResponse,
    GenerationContext,
    Generator,
    MockGenerator,
    assemble_context,
    generate_response,
)
from stagevis.index import DEFAULT_K_RETRIEVE, FieldIndexSet, RankedList, build_field_indexes, rrf_retrieve
from stagevis.optimize import OptimizationScope, Rewriter, StrategySpec, apply_strategy, get_strategy
from stagevis.rerank import DEFAULT_K_RERANK, OverlapScorer, Scorer, rerank_candidates
from stagevis.webdoc import DocumentContent

log = logging.getLogger(__name__)

STAGES = ("retrieval", "reranking", "generation")
DEFAULT_METRIC_K_RETRIEVAL = 20
DEFAULT_PROVENANCE_THRESHOLD = 0.8
REGIONS = ("title", "meta_description", "headings", "jsonld", "body")


@dataclass(frozen=True)
class PipelineConfig:
    k_retrieve: int = DEFAULT_K_RETRIEVE
    k_rerank: int = DEFAULT_K_RERANK
    include_jsonld: bool = False
    provenance_threshold: float = DEFAULT_PROVENANCE_THRESHOLD

    def __post_init__(self):
        if self.k_retrieve < 1 or self.k_rerank < 1:
            raise ConfigError("k_retrieve and k_rerank must be >= 1")
        if not 0.0 <= self.provenance_threshold <= 1.0:
            raise ConfigError(f"provenance threshold must be in [0, 1], got {self.provenance_threshold}")

    @property
    def retrieval_miss(self) -> int:
        return self.k_retrieve + 1

    @property
    def reranking_miss(self) -> int:
        return self.k_rerank + 1


@dataclass
class Bindings:
    scorer: Scorer = field(default_factory=OverlapScorer)
    generator: Generator = field(default_factory=MockGenerator)

    def describe(self) -> dict[str, Any]:
        d = lambda obj: obj.describe() if hasattr(obj, "describe") else {"kind": type(obj).__name__}  # noqa: E731
        return {"reranker": d(self.scorer), "generator": d(self.generator)}


@dataclass(frozen=True)
class StageTrace:
    query_id: str
    query: str
    snapshot_id: str
    retrieval: RankedList
    reranked: RankedList
    context: GenerationContext
    response: GeneratedResponse

    __hash__ = None  # type: ignore[assignment]

    def to_dict(self) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "query": self.query,
            "snapshot_id": self.snapshot_id,
            "retrieval": [[pid, s] for pid, s in self.retrieval],
            "reranked": [[pid, s] for pid, s in self.reranked],
            "context": [asdict(c) for c in self.context.candidates],
            "response": {
                "text": self.response.text,
                "citations": [asdict(c) for c in self.response.citations],
                "quotes": {str(k): v for k, v in sorted(self.response.quotes.items())},
                "malformed": self.response.malformed,
            },
        }


def run_pipeline(
    query: str,
    snapshot: CorpusSnapshot,
    index_set: FieldIndexSet,
    bindings: Bindings | None = None,
    config: PipelineConfig | None = None,
    query_id: str = "",
) -> StageTrace:
    """retrieve -> rerank -> assemble context -> generate -> parse citations."""
    if index_set.snapshot_id != snapshot.snapshot_id:
        raise ConfigError(f"index is bound to snapshot {index_set.snapshot_id}, not {snapshot.snapshot_id}")
    bindings = bindings or Bindings()
    config = config or PipelineConfig()
    retrieval = rrf_retrieve(query, index_set, k=config.k_retrieve)
    reranked = rerank_candidates(query, retrieval, snapshot, bindings.scorer, k=config.k_rerank)
    context = assemble_context(query, reranked, snapshot, k=config.k_rerank, include_jsonld=config.include_jsonld)
    response = generate_response(context, bindings.generator)
    return StageTrace(query_id, query, snapshot.snapshot_id, retrieval, reranked, context, response)


def doc_of_passage(passage_id: str) -> str:
    return passage_id.rsplit(":", 1)[0]


def doc_rank(ranked: RankedList | Sequence[str], doc_id: str, miss_rank: int) -> int:
    """Best (smallest) 1-based position of any passage of `doc_id`, else `miss_rank`."""
    ids = ranked.ids if isinstance(ranked, RankedList) else ranked
    for pos, pid in enumerate(ids, 1):
        if doc_of_passage(pid) == doc_id:
            return pos
    return miss_rank


def instance_seed(run_seed: int, query_id: str) -> int:
    digest = hashlib.sha256(f"{run_seed}\x00{query_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def select_target(trace: StageTrace, seed: int) -> str | None:
    """Uniform seeded draw over the distinct documents in the reranked list."""
    docs = sorted({doc_of_passage(pid) for pid in trace.reranked.ids})
    if not docs:
        return None
    return random.Random(seed).choice(docs)


@dataclass(frozen=True)
class EvalInstance:
    query_id: str
    query: str
    domain: str
    target: str
    seed: int


@dataclass(frozen=True)
class VisibilityRecord:
    query_id: str
    side: str
    strategy: str
    scope: str
    backend: str
    domain: str = ""
    target: str = ""
    retrieval_rank: int | None = None
    reranking_rank: int | None = None
    generation_rank: int | None = None
    cited: bool = False
    status: str = "ok"
    failed_stage: str | None = None
    error: str | None = None
    snapshot_id: str = ""
    malformed_markers: int = 0
    scope_violations: tuple[str, ...] = ()
    provenance: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def rank(self, stage: str) -> int | None:
        return getattr(self, f"{stage}_rank")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["scope_violations"] = list(self.scope_violations)
        d["provenance"] = list(self.provenance)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "VisibilityRecord":
        d = dict(d)
        d["scope_violations"] = tuple(d.get("scope_violations") or ())
        d["provenance"] = tuple(d.get("provenance") or ())
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


def _record(
    instance: EvalInstance,
    trace: StageTrace,
    document: DocumentContent,
    side: str,
    cell: dict[str, str],
    config: PipelineConfig,
    **extra,
) -> VisibilityRecord:
    gen_rank = trace.response.rank_of(instance.target)
    prov = citation_provenance(trace.response, trace.context, document, config.provenance_threshold)
    return VisibilityRecord(
        query_id=instance.query_id,
        side=side,
        domain=instance.domain,
        target=instance.target,
        retrieval_rank=doc_rank(trace.retrieval, instance.target, config.retrieval_miss),
        reranking_rank=doc_rank(trace.reranked, instance.target, config.reranking_miss),
        generation_rank=gen_rank,
        cited=gen_rank is not None,
        snapshot_id=trace.snapshot_id,
        malformed_markers=trace.response.malformed,
        provenance=tuple(p.region for p in prov),
        **cell,
        **extra,
    )


def _failed(instance: EvalInstance, side: str, cell: dict[str, str], exc: StageError) -> VisibilityRecord:
    return VisibilityRecord(
        query_id=instance.query_id, side=side, domain=instance.domain, target=instance.target,
        status="failed", failed_stage=exc.stage, error=exc.message, **cell,
    )


def evaluate_instance(
    instance: EvalInstance,
    strategy: StrategySpec | str,
    scope: OptimizationScope | str,
    snapshot: CorpusSnapshot,
    index_set: FieldIndexSet,
    bindings: Bindings | None = None,
    rewriter: Rewriter | None = None,
    config: PipelineConfig | None = None,
    baseline: StageTrace | None = None,
    backend_label: str | None = None,
) -> tuple[VisibilityRecord, VisibilityRecord]:
    """Optimize the target, reindex, rerun the same query, and record both sides.

    Works on a fresh snapshot + index, so concurrent instances never see each
    other's edits.
    """
    bindings = bindings or Bindings()
    config = config or PipelineConfig()
    spec = get_strategy(strategy) if isinstance(strategy, str) else strategy
    scope = OptimizationScope(scope)
    label = backend_label or (getattr(rewriter, "kind", None) or "identity")
    cell = {"strategy": spec.name, "scope": scope.value, "backend": label}

    if baseline is None:
        try:
            baseline = run_pipeline(instance.query, snapshot, index_set, bindings, config, instance.query_id)
        except StageError as exc:
            return _failed(instance, "baseline", cell, exc), _failed(instance, "optimized", cell, exc)
    base = _record(instance, baseline, snapshot.documents[instance.target], "baseline", cell, config)

    try:
        scoped = apply_strategy(snapshot.documents[instance.target], spec, scope, rewriter)
        if scoped.violations:
            log.warning("%s/%s: backend touched out-of-scope fields %s", instance.query_id, spec.name, sorted(scoped.violations))
        new_snapshot = replace_document(snapshot, instance.target, scoped.document)
        new_index = build_field_indexes(new_snapshot, index_set.params)
        trace = run_pipeline(instance.query, new_snapshot, new_index, bindings, config, instance.query_id)
    except StageError as exc:
        return base, _failed(instance, "optimized", cell, exc)
    opt = _record(
        instance, trace, scoped.document, "optimized", cell, config,
        scope_violations=tuple(sorted(scoped.violations)),
    )
    return base, opt


# -- campaigns -----------------------------------------------------------


@dataclass(frozen=True)
class Query:
    query_id: str
    text: str
    domain: str = ""


@dataclass
class CampaignResult:
    records: list[VisibilityRecord]
    skipped: list[dict[str, str]]

    @property
    def failed(self) -> int:
        return sum(1 for r in self.records if not r.ok)


def _record_key(r: VisibilityRecord):
    return (r.strategy, r.scope, r.backend, r.query_id, 0 if r.side == "baseline" else 1)


def run_campaign(
    queries: Sequence[Query],
    snapshot: CorpusSnapshot,
    index_set: FieldIndexSet,
    strategies: Sequence[StrategySpec | str],
    scopes: Sequence[OptimizationScope | str],
    bindings: Bindings | None = None,
    rewriter: Rewriter | None = None,
    config: PipelineConfig | None = None,
    seed: int = 0,
    parallelism: int = 1,
    backend_label: str | None = None,
) -> CampaignResult:
    """Baseline every query once, then evaluate each strategy x scope cell.

    Output order is canonical (strategy, scope, backend, query_id, side),
    independent of completion order.
    """
    bindings = bindings or Bindings()
    config = config or PipelineConfig()
    specs = [get_strategy(s) if isinstance(s, str) else s for s in strategies]
    scopes = [OptimizationScope(s) for s in scopes]
    parallelism = max(1, parallelism)

    def baseline(q: Query):
        try:
            return q, run_pipeline(q.text, snapshot, index_set, bindings, config, q.query_id), None
        except StageError as exc:
            return q, None, exc

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        baselines = list(pool.map(baseline, queries))

    skipped: list[dict[str, str]] = []
    jobs = []
    for q, trace, exc in baselines:
        if exc is not None:
            skipped.append({"query_id": q.query_id, "reason": f"baseline {exc.stage} failed: {exc.message}"})
            continue
        seed_q = instance_seed(seed, q.query_id)
        target = select_target(trace, seed_q)
        if target is None:
            skipped.append({"query_id": q.query_id, "reason": "empty reranked list"})
            continue
        inst = EvalInstance(q.query_id, q.text, q.domain, target, seed_q)
        for spec in specs:
            for scope in scopes:
                jobs.append((inst, spec, scope, trace))

    def work(job):
        inst, spec, scope, trace = job
        return evaluate_instance(inst, spec, scope, snapshot, index_set, bindings, rewriter, config, trace, backend_label)

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        pairs = list(pool.map(work, jobs))
    records = sorted((r for pair in pairs for r in pair), key=_record_key)
    return CampaignResult(records, sorted(skipped, key=lambda s: s["query_id"]))


# -- metrics -------------------------------------------------------------


def hit_rate(ranks: Iterable[int], k: int) -> float | None:
    ranks = list(ranks)
    if not ranks:
        return None
    return sum(1 for r in ranks if r <= k) / len(ranks)


def citation_rate(cited: Iterable[bool]) -> float | None:
    cited = list(cited)
    if not cited:
        return None
    return sum(1 for c in cited if c) / len(cited)


def delta_rank(base: Sequence[int], optimized: Sequence[int]) -> float | None:
    """Mean of base - optimized; positive means the target moved up."""
    if len(base) != len(optimized):
        raise ValueError("rank sequences differ in length")
    if not base:
        return None
    return sum(b - o for b, o in zip(base, optimized)) / len(base)


def pct_change(value: float | None, baseline: float | None) -> float | None:
    if value is None or baseline is None or baseline == 0:
        return None
    return (value - baseline) / baseline


@dataclass(frozen=True)
class StageMetrics:
    stage: str
    k: int
    n: int
    baseline: float | None
    value: float | None
    delta_rank: float | None
    delta_n: int

    @property
    def pct_change(self) -> float | None:
        return pct_change(self.value, self.baseline)


def paired(records: Iterable[VisibilityRecord]) -> list[tuple[VisibilityRecord, VisibilityRecord]]:
    """(baseline, optimized) pairs where both sides succeeded."""
    sides: dict[tuple, dict[str, VisibilityRecord]] = {}
    for r in records:
        sides.setdefault((r.query_id, r.strategy, r.scope, r.backend), {})[r.side] = r
    out = []
    for key in sorted(sides):
        s = sides[key]
        if "baseline" in s and "optimized" in s and s["baseline"].ok and s["optimized"].ok:
            out.append((s["baseline"], s["optimized"]))
    return out


def compute_metrics(
    records: Iterable[VisibilityRecord],
    stage: str,
    k: int,
    generation_delta: str = "cocited",
    generation_miss: int = DEFAULT_K_RERANK + 1,
) -> StageMetrics:
    """Hit rate (or citation rate at generation) on both sides plus mean rank change.

    Generation rank change averages over instances cited on both sides by
    default; ``generation_delta="all"`` substitutes `generation_miss` for
    uncited sides instead.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if generation_delta not in ("cocited", "all"):
        raise ValueError(f"generation_delta must be 'cocited' or 'all', got {generation_delta!r}")
    pairs = paired(records)
    if stage == "generation":
        base_v = citation_rate(b.cited for b, _ in pairs)
        opt_v = citation_rate(o.cited for _, o in pairs)
        if generation_delta == "cocited":
            both = [(b.generation_rank, o.generation_rank) for b, o in pairs if b.cited and o.cited]
        else:
            both = [
                (b.generation_rank or generation_miss, o.generation_rank or generation_miss) for b, o in pairs
            ]
    else:
        base_v = hit_rate((b.rank(stage) for b, _ in pairs), k)
        opt_v = hit_rate((o.rank(stage) for _, o in pairs), k)
        both = [(b.rank(stage), o.rank(stage)) for b, o in pairs]
    dr = delta_rank([b for b, _ in both], [o for _, o in both])
    return StageMetrics(stage, k, len(pairs), base_v, opt_v, dr, len(both))


# -- citation provenance -------------------------------------------------


def region_texts(document: DocumentContent) -> dict[str, str]:
    s = document.structural
    return {
        "title": s.title,
        "meta_description": s.meta_description,
        "headings": "\n".join(t for _, t in s.headings),
        "jsonld": s.jsonld_text,
        "body": document.body,
    }


def window_similarity(quote: str, text: str) -> float:
    """Best normalized Levenshtein similarity of `quote` against any same-length window of `text`."""
    if not quote or not text:
        return 0.0
    if quote in text:
        return 1.0
    n = len(quote)
    if len(text) <= n:
        return Levenshtein.normalized_similarity(quote, text)
    best = 0.0
    for i in range(len(text) - n + 1):
        sim = Levenshtein.normalized_similarity(quote, text[i:i + n], score_cutoff=best)
        if sim > best:
            best = sim
    return best


@dataclass(frozen=True)
class Provenance:
    citation_order: int
    context_index: int
    quote: str
    region: str
    similarity: float


def locate_quote(quote: str, document: DocumentContent, threshold: float = DEFAULT_PROVENANCE_THRESHOLD) -> tuple[str, float]:
    """Region whose text best contains `quote`; first region wins ties."""
    best_region, best = "unmatched", 0.0
    for region, text in region_texts(document).items():
        sim = window_similarity(quote, text)
        if sim > best:
            best_region, best = region, sim
    if best < threshold:
        return "unmatched", best
    return best_region, best


def citation_provenance(
    response: GeneratedResponse,
    context: GenerationContext,
    document: DocumentContent,
    threshold: float = DEFAULT_PROVENANCE_THRESHOLD,
) -> list[Provenance]:
    """Attribute each quote cited from `document` to the document region it came from."""
    out = []
    for c in response.citations:
        if c.doc_id != document.doc_id:
            continue
        indices = [cand.index for cand in context.candidates if cand.doc_id == c.doc_id]
        for idx in indices:
            quote = response.quotes.get(idx)
            if not quote:
                continue
            region, sim = locate_quote(quote, document, threshold)
            out.append(Provenance(c.order, idx, quote, region, sim))
    return out
