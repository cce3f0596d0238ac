"""Per-field Okapi BM25 indexes fused with reciprocal rank fusion."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from stagevis.corpus import FIELDS, CorpusSnapshot
from stagevis.errors import ConfigError
from stagevis.text import terms

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_KAPPA = 60.0
DEFAULT_K_RETRIEVE = 100


@dataclass(frozen=True)
class BM25Params:
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    kappa: float = DEFAULT_KAPPA
    weights: tuple[tuple[str, float], ...] = tuple((f, 1.0) for f in FIELDS)

    def __post_init__(self):
        if self.k1 < 0 or not 0 <= self.b <= 1:
            raise ConfigError(f"bm25 parameters out of range: k1={self.k1} b={self.b}")
        if self.kappa < 0:
            raise ConfigError(f"rrf kappa must be non-negative, got {self.kappa}")
        if isinstance(self.weights, Mapping):
            object.__setattr__(self, "weights", tuple((f, float(self.weights.get(f, 1.0))) for f in FIELDS))
        unknown = {f for f, _ in self.weights} - set(FIELDS)
        if unknown:
            raise ConfigError(f"unknown field weights: {sorted(unknown)}")

    def weight(self, field_name: str) -> float:
        return dict(self.weights).get(field_name, 1.0)


@dataclass(frozen=True)
class RankedList:
    """Ordered (passage_id, score) pairs, best first.

    Ties are broken by ascending passage_id.
    """

    entries: tuple[tuple[str, float], ...] = ()
    stage: str = ""

    @classmethod
    def from_scores(cls, scores: Mapping[str, float] | Iterable[tuple[str, float]], stage: str, k: int | None = None) -> "RankedList":
        items = scores.items() if isinstance(scores, Mapping) else scores
        ordered = sorted(items, key=lambda kv: (-kv[1], kv[0]))
        if k is not None:
            ordered = ordered[:k]
        return cls(tuple((pid, float(s)) for pid, s in ordered), stage)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [pid for pid, _ in self.entries]

    def positions(self) -> dict[str, int]:
        """passage_id -> 1-based rank."""
        return {pid: i for i, (pid, _) in enumerate(self.entries, 1)}


@dataclass
class FieldIndex:
    postings: dict[str, dict[str, int]] = field(default_factory=dict)
    lengths: dict[str, int] = field(default_factory=dict)

    @property
    def n_units(self) -> int:
        return len(self.lengths)

    @property
    def avg_length(self) -> float:
        return sum(self.lengths.values()) / len(self.lengths) if self.lengths else 0.0

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def add(self, passage_id: str, tokens: list[str]) -> None:
        self.lengths[passage_id] = len(tokens)
        for term, tf in Counter(tokens).items():
            self.postings.setdefault(term, {})[passage_id] = tf


@dataclass(frozen=True)
class FieldIndexSet:
    snapshot_id: str
    params: BM25Params
    fields: dict[str, FieldIndex]

    def stats(self) -> dict[str, dict[str, float]]:
        return {
            name: {
                "units": idx.n_units,
                "terms": len(idx.postings),
                "postings": sum(len(p) for p in idx.postings.values()),
                "avg_length": idx.avg_length,
            }
            for name, idx in self.fields.items()
        }


def build_field_indexes(snapshot: CorpusSnapshot, params: BM25Params | None = None) -> FieldIndexSet:
    """One inverted index per semantic-unit field.

    A unit whose text for a field tokenizes to nothing is left out of that
    field's index entirely, so it neither counts toward N nor avgdl.
    """
    params = params or BM25Params()
    fields = {name: FieldIndex() for name in FIELDS}
    for unit in snapshot.semantic_units():
        for name in FIELDS:
            tokens = terms(unit.elements[name])
            if tokens:
                fields[name].add(unit.passage_id, tokens)
    return FieldIndexSet(snapshot.snapshot_id, params, fields)


def idf(n_units: int, df: int) -> float:
    # Non-negative variant: ln(1 + (N - df + 0.5) / (df + 0.5)).
    return math.log(1.0 + (n_units - df + 0.5) / (df + 0.5))


def bm25_scores(query: str, index: FieldIndex, k1: float, b: float) -> dict[str, float]:
    scores: dict[str, float] = {}
    if not index.n_units:
        return scores
    avgdl = index.avg_length
    for term in terms(query):
        posting = index.postings.get(term)
        if not posting:
            continue
        w = idf(index.n_units, len(posting))
        for pid, tf in posting.items():
            norm = k1 * (1.0 - b + b * index.lengths[pid] / avgdl)
            scores[pid] = scores.get(pid, 0.0) + w * tf * (k1 + 1.0) / (tf + norm)
    return scores


def field_rank(query: str, field_name: str, index_set: FieldIndexSet) -> RankedList:
    if field_name not in index_set.fields:
        raise KeyError(field_name)
    p = index_set.params
    scores = bm25_scores(query, index_set.fields[field_name], p.k1, p.b)
    return RankedList.from_scores({pid: s for pid, s in scores.items() if s > 0}, stage=f"field:{field_name}")


def rrf_fuse(rankings: Mapping[str, RankedList], kappa: float, weights: Mapping[str, float] | None = None, k: int | None = None) -> RankedList:
    fused: dict[str, float] = {}
    for name, ranking in rankings.items():
        w = 1.0 if weights is None else weights.get(name, 1.0)
        if w == 0:
            continue
        for rank, (pid, _) in enumerate(ranking.entries, 1):
            fused[pid] = fused.get(pid, 0.0) + w / (kappa + rank)
    return RankedList.from_scores(fused, stage="retrieval", k=k)


def rrf_retrieve(query: str, index_set: FieldIndexSet, k: int = DEFAULT_K_RETRIEVE) -> RankedList:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    rankings = {name: field_rank(query, name, index_set) for name in FIELDS}
    return rrf_fuse(rankings, index_set.params.kappa, dict(index_set.params.weights), k=k)
