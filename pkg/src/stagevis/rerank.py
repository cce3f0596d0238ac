"""Passage-level reranking with pluggable scorers."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol, Sequence

from stagevis.corpus import CorpusSnapshot
from stagevis.errors import ConfigError, StageError
from stagevis.index import RankedList
from stagevis.service import ServiceClient, ServiceError
from stagevis.text import terms

DEFAULT_K_RERANK = 10


def overlap_score(query: str, passage_text: str) -> float:
    """Fraction of distinct query terms that occur in the passage."""
    q = set(terms(query))
    if not q:
        return 0.0
    return len(q & set(terms(passage_text))) / len(q)


class Scorer(Protocol):
    def score(self, query: str, passages: Sequence[tuple[str, str]]) -> dict[str, float]:
        """Map passage id -> relevance score; each pair scored independently."""


class OverlapScorer:
    kind = "builtin-overlap"

    def score(self, query, passages):
        return {pid: overlap_score(query, text) for pid, text in passages}

    def describe(self) -> dict:
        return {"kind": self.kind}


@dataclass
class ServiceScorer:
    """Client for an external score-only reranking service.

    Request ``{"query", "passages": [{"id", "text"}]}``, response
    ``{"scores": [{"id", "score"}]}``. The service never reorders; every id
    sent must come back.
    """

    endpoint: str
    timeout: float = 30.0
    max_batch: int = 32
    parallelism: int = 4
    retries: int = 3
    backoff: float = 0.5
    kind = "external-service"

    def __post_init__(self):
        if self.max_batch < 1 or self.parallelism < 1:
            raise ConfigError("max_batch and parallelism must be >= 1")
        self._client = ServiceClient(self.endpoint, self.timeout, self.retries, self.backoff)

    def _score_batch(self, query: str, batch: Sequence[tuple[str, str]]) -> dict[str, float]:
        body = self._client.post({"query": query, "passages": [{"id": pid, "text": t} for pid, t in batch]})
        try:
            got = {str(item["id"]): float(item["score"]) for item in body["scores"]}
        except (KeyError, TypeError, ValueError) as exc:
            raise ServiceError(f"malformed scores payload: {exc}") from None
        missing = [pid for pid, _ in batch if pid not in got]
        if missing:
            raise ServiceError(f"response missing ids: {missing[:5]}")
        bad = [pid for pid, _ in batch if not math.isfinite(got[pid])]
        if bad:
            raise ServiceError(f"non-finite scores for: {bad[:5]}")
        return {pid: got[pid] for pid, _ in batch}

    def score(self, query, passages):
        batches = [passages[i:i + self.max_batch] for i in range(0, len(passages), self.max_batch)]
        scores: dict[str, float] = {}
        with ThreadPoolExecutor(max_workers=min(self.parallelism, max(1, len(batches)))) as pool:
            for part in pool.map(lambda b: self._score_batch(query, b), batches):
                scores.update(part)
        return scores

    def describe(self) -> dict:
        return {"kind": self.kind, "endpoint": self.endpoint, "timeout": self.timeout, "max_batch": self.max_batch}


def rerank_candidates(
    query: str,
    candidates: RankedList,
    snapshot: CorpusSnapshot,
    scorer: Scorer | None = None,
    k: int = DEFAULT_K_RERANK,
) -> RankedList:
    """Rescore candidates on passage text, sort, keep the top `k`."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    scorer = scorer or OverlapScorer()
    pairs = [(pid, snapshot.passages[pid].text) for pid in sorted(set(candidates.ids))]
    if not pairs:
        return RankedList((), stage="reranking")
    try:
        scores = scorer.score(query, pairs)
    except ServiceError as exc:
        raise StageError("reranking", str(exc)) from exc
    return RankedList.from_scores({pid: scores[pid] for pid, _ in pairs}, stage="reranking", k=k)
