"""Cited answer generation over the reranked top-k passages."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, NamedTuple, Protocol

from stagevis.corpus import CorpusSnapshot
from stagevis.errors import StageError
from stagevis.index import RankedList
from stagevis.rerank import DEFAULT_K_RERANK, overlap_score
from stagevis.service import ServiceClient, ServiceError
from stagevis.text import sentences
from stagevis.webdoc import serialize_headings

log = logging.getLogger(__name__)

PROMPT_VERSION = "generation-v1"
_MARKER = re.compile(r"\[(\d+)\]")


def generation_instructions() -> str:
    return resources.files("stagevis").joinpath("prompts/generation_v1.txt").read_text(encoding="utf-8")


@dataclass(frozen=True)
class ContextCandidate:
    index: int
    passage_id: str
    doc_id: str
    title: str
    meta_description: str
    headings: str
    jsonld_text: str
    passage: str


@dataclass(frozen=True)
class GenerationContext:
    query: str
    candidates: tuple[ContextCandidate, ...] = ()
    include_jsonld: bool = False

    def __len__(self) -> int:
        return len(self.candidates)

    def doc_at(self, index: int) -> str | None:
        if 1 <= index <= len(self.candidates):
            return self.candidates[index - 1].doc_id
        return None

    def render(self) -> str:
        """Prompt body: one block per candidate, in reranked order."""
        lines = [f"Question: {self.query}", ""]
        for c in self.candidates:
            lines.append(f"[{c.index}] Title: {c.title}")
            lines.append(f"Description: {c.meta_description}")
            lines.append("Headings: " + " | ".join(c.headings.splitlines()))
            if self.include_jsonld:
                lines.append(f"Structured data: {c.jsonld_text}")
            lines.append(f"Passage: {c.passage}")
            lines.append("")
        return "\n".join(lines)

    def payload(self) -> dict[str, Any]:
        cands = []
        for c in self.candidates:
            item = {
                "index": c.index,
                "title": c.title,
                "meta_description": c.meta_description,
                "headings": c.headings,
                "passage": c.passage,
            }
            if self.include_jsonld:
                item["jsonld_text"] = c.jsonld_text
            cands.append(item)
        return {"query": self.query, "candidates": cands, "instructions": generation_instructions()}


def assemble_context(
    query: str,
    reranked: RankedList,
    snapshot: CorpusSnapshot,
    k: int = DEFAULT_K_RERANK,
    include_jsonld: bool = False,
) -> GenerationContext:
    cands = []
    seen = set()
    for pid in reranked.ids:
        if pid in seen:
            continue
        seen.add(pid)
        if len(cands) == k:
            break
        passage = snapshot.passages[pid]
        s = snapshot.documents[passage.doc_id].structural
        cands.append(
            ContextCandidate(
                index=len(cands) + 1,
                passage_id=pid,
                doc_id=passage.doc_id,
                title=s.title,
                meta_description=s.meta_description,
                headings=serialize_headings(s.headings),
                jsonld_text=s.jsonld_text,
                passage=passage.text,
            )
        )
    return GenerationContext(query, tuple(cands), include_jsonld)


@dataclass(frozen=True)
class Citation:
    order: int
    context_index: int
    doc_id: str


class CitationParse(NamedTuple):
    citations: tuple[Citation, ...]
    malformed: int


def parse_citations(text: str, context: GenerationContext) -> CitationParse:
    """Citation order = order of each document's first marker in `text`.

    Markers outside 1..k count as malformed; repeats of an already-cited
    document are skipped silently.
    """
    citations: list[Citation] = []
    cited = set()
    malformed = 0
    for m in _MARKER.finditer(text):
        index = int(m.group(1))
        doc_id = context.doc_at(index)
        if doc_id is None:
            malformed += 1
            continue
        if doc_id in cited:
            continue
        cited.add(doc_id)
        citations.append(Citation(len(citations) + 1, index, doc_id))
    return CitationParse(tuple(citations), malformed)


@dataclass(frozen=True)
class GeneratedResponse:
    text: str = ""
    citations: tuple[Citation, ...] = ()
    quotes: dict[int, str] = field(default_factory=dict)
    malformed: int = 0

    __hash__ = None  # type: ignore[assignment]

    def rank_of(self, doc_id: str) -> int | None:
        for c in self.citations:
            if c.doc_id == doc_id:
                return c.order
        return None


class Generator(Protocol):
    def generate(self, context: GenerationContext) -> dict[str, Any]:
        """Return ``{"text": ..., "quotes": [{"index", "quote"}]}``; quotes optional."""


@dataclass
class MockGenerator:
    """Extractive, deterministic stand-in for an LLM.

    For each of the first `max_sources` candidates it takes the sentence with
    the highest query-term overlap (earliest on ties) and tags it with the
    candidate's marker. Candidates whose best sentence shares no term with
    the query are not cited.
    """

    max_sources: int = 5
    kind = "mock"

    def generate(self, context):
        parts, quotes = [], []
        for c in context.candidates[: self.max_sources]:
            best, best_score = None, 0.0
            for sent in sentences(c.passage):
                score = overlap_score(context.query, sent)
                if score > best_score:
                    best, best_score = sent, score
            if best is None:
                continue
            parts.append(f"{best} [{c.index}]")
            quotes.append({"index": c.index, "quote": best})
        return {"text": " ".join(parts), "quotes": quotes}

    def describe(self) -> dict:
        return {"kind": self.kind, "max_sources": self.max_sources}


@dataclass
class ServiceGenerator:
    endpoint: str
    timeout: float = 120.0
    retries: int = 3
    backoff: float = 1.0
    kind = "external-service"

    def generate(self, context):
        return ServiceClient(self.endpoint, self.timeout, self.retries, self.backoff).post(context.payload())

    def describe(self) -> dict:
        return {"kind": self.kind, "endpoint": self.endpoint, "prompt": PROMPT_VERSION}


def _quotes(raw: Any) -> dict[int, str]:
    out: dict[int, str] = {}
    for item in raw or ():
        try:
            index, quote = int(item["index"]), str(item["quote"])
        except (KeyError, TypeError, ValueError):
            continue
        out.setdefault(index, quote)
    return out


def generate_response(context: GenerationContext, backend: Generator | None = None) -> GeneratedResponse:
    if not context.candidates:
        return GeneratedResponse()
    backend = backend or MockGenerator()
    try:
        out = backend.generate(context)
    except ServiceError as exc:
        raise StageError("generation", str(exc)) from exc
    text = out.get("text")
    if not isinstance(text, str):
        raise StageError("generation", "backend response has no text")
    parsed = parse_citations(text, context)
    if parsed.malformed:
        log.warning("dropped %d malformed citation marker(s)", parsed.malformed)
    return GeneratedResponse(text, parsed.citations, _quotes(out.get("quotes")), parsed.malformed)
