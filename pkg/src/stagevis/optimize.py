"""Optimization strategies as scoped prompt templates, plus rewriting backends.

A strategy is data: a template whose placeholders are drawn from a closed
set of document fields and the scope directive. Only the backend that
executes the prompt varies. Whatever the backend returns, fields outside the
requested scope are restored from the original document.
"""

from __future__ import annotations

import enum
import json
import re
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol

from stagevis.errors import ConfigError, StageError, UnknownStrategy
from stagevis.service import ServiceClient, ServiceError
from stagevis.text import normalize, normalize_lines
from stagevis.webdoc import DocumentContent, StructuralInfo, parse_headings, serialize_headings

PLACEHOLDERS = frozenset({"title", "meta_description", "headings", "jsonld_text", "body", "scope"})
DOC_FIELDS = ("title", "meta_description", "headings", "jsonld_text", "body")
STRUCTURAL = frozenset(DOC_FIELDS[:4])
_PLACEHOLDER = re.compile(r"\{\{(\w+)\}\}")


class OptimizationScope(str, enum.Enum):
    BODY = "body"
    STRUCTURAL = "structural"
    BOTH = "both"

    @property
    def fields(self) -> frozenset[str]:
        if self is OptimizationScope.BODY:
            return frozenset({"body"})
        if self is OptimizationScope.STRUCTURAL:
            return STRUCTURAL
        return frozenset(DOC_FIELDS)

    @property
    def directive(self) -> str:
        return _SCOPE_DIRECTIVES[self]


_SCOPE_DIRECTIVES = {
    OptimizationScope.BODY: (
        "Rewrite only the body field. Return title, meta_description, headings and "
        "jsonld_text exactly as given."
    ),
    OptimizationScope.STRUCTURAL: (
        "Rewrite only title, meta_description, headings and jsonld_text. Return the "
        "body exactly as given."
    ),
    OptimizationScope.BOTH: "You may rewrite any of the five fields.",
}


@dataclass(frozen=True)
class StrategySpec:
    name: str
    prompt_template: str
    notes: str = ""
    enabled: bool = True

    def __post_init__(self):
        unknown = set(_PLACEHOLDER.findall(self.prompt_template)) - PLACEHOLDERS
        if unknown:
            raise ConfigError(f"strategy {self.name!r}: unknown placeholders {sorted(unknown)}")


_DOCUMENT_BLOCK = """
[Scope]
{{scope}}

[Document]
title: {{title}}
meta_description: {{meta_description}}
headings (one per line, "H<level> <text>"):
{{headings}}
jsonld_text: {{jsonld_text}}
body:
{{body}}

[Output]
Return a JSON object {"fields": {"title": ..., "meta_description": ..., "headings": ..., "jsonld_text": ..., "body": ...}}.
Keep the headings format "H<level> <text>", one heading per line.
"""


def _geo(instruction: str) -> str:
    return (
        "[Task]\nRewrite the web document below. " + instruction
        + " Do not add facts that contradict the original.\n" + _DOCUMENT_BLOCK
    )


_GEO_INSTRUCTIONS = {
    "authoritative": "Use a confident, persuasive voice and state points definitively, staying factually accurate.",
    "cite_sources": "Add short inline references to credible external sources that back up the statements.",
    "fluency": "Fix grammar and smooth sentence structure and transitions; the meaning must not change.",
    "quotation": "Work in quotations from recognised experts or institutions, each with attribution.",
    "easy_language": "Swap difficult vocabulary for everyday words and shorten long sentences, keeping every fact.",
    "statistics": "Add concrete numbers and quantitative facts inside the sentences that make claims.",
    "technical_terms": "Use the specialist terminology of the document's field where it fits.",
    "unique_words": "Use rarer, more distinctive word choices in place of common ones.",
}

_ALL_IN_ONE = (
    "Apply all of the following at once. "
    + " ".join(f"({i}) {text}" for i, text in enumerate(_GEO_INSTRUCTIONS.values(), 1))
    + " Then improve layout: mark key points in bold with **double asterisks** and break long paragraphs into short ones."
)

# Stage-aware prompt, kept word for word (including its punctuation).
_STAGE_AWARE = """[Task Description]
Optimize the following document with these strategies. Keep the content faithful to the original.

[Pre-Optimization Considerations]
Before optimizing, think about two things:
1. Domain: Consider what domain this document belongs to (e.g., medical, finance, e-commerce, technical, casual). Match the tone and vocabulary to what readers in that domain expect.
2. Quality: If a field is already clear, specific, and well-written, keep it as-is. Only optimize fields that genuinely benefit from it. Not every document needs heavy changes.

[Optimization Strategies]
1. Entity mirroring (structural fields):
Incorporate key entities, numbers, and domain terms from the body into the title, meta_description, headings, and jsonld_text. Add a keyword-rich summary sentence while keeping compact. Skip if the structural fields already contain the right keywords.

2. Fluent, easy language (all text):
Rewrite sentences to be smooth, clear, and easy to read. Use simple words and short sentences. Avoid jargon when a plain alternative exists. If the writing is already clear and fluent, leave it unchanged.

3. Concrete evidence (body text):
Make claims specific. Bring front the main claim to the very start of the body. Each claim should be self-contained — a reader should understand it without reading surrounding text. If claims are already specific, do not rephrase them.

4. Keyword reinforcement (body text):
Naturally repeat the document's core topic terms and key phrases throughout the body. Use the main subject name instead of pronouns where it reads naturally. This keeps every paragraph clearly connected to the topic.
""" + _DOCUMENT_BLOCK

STAGE_AWARE_BLOCKS = (
    "1. Entity mirroring (structural fields):",
    "2. Fluent, easy language (all text):",
    "3. Concrete evidence (body text):",
    "4. Keyword reinforcement (body text):",
)

_IDENTITY = "[Task]\nReturn every field of the document below unchanged.\n" + _DOCUMENT_BLOCK


def autogeo_strategy(rules: Iterable[str]) -> StrategySpec:
    """AutoGEO needs externally learned preference rules; none ship here."""
    rules = [r.strip() for r in rules if r.strip()]
    if not rules:
        raise ConfigError("autogeo requires at least one preference rule")
    body = "\n".join(f"- {r}" for r in rules)
    return StrategySpec(
        "autogeo",
        "[Task]\nRewrite the web document below so that it follows these rules:\n" + body + "\n" + _DOCUMENT_BLOCK,
        notes="rules supplied by user",
    )


def _builtin() -> dict[str, StrategySpec]:
    reg = {"identity": StrategySpec("identity", _IDENTITY, notes="no-op; harness self-test")}
    for name, text in _GEO_INSTRUCTIONS.items():
        reg[name] = StrategySpec(name, _geo(text))
    reg["all_in_one"] = StrategySpec("all_in_one", _geo(_ALL_IN_ONE), notes="bold markers survive as literal asterisks")
    reg["stage_aware"] = StrategySpec("stage_aware", _STAGE_AWARE)
    reg["autogeo"] = StrategySpec(
        "autogeo", "[Task]\nNo preference rules configured.\n" + _DOCUMENT_BLOCK,
        notes="disabled until rules are supplied via autogeo_strategy()", enabled=False,
    )
    return reg


_REGISTRY = _builtin()
_REGISTRY_LOCK = threading.Lock()


def strategy_key(name: str) -> str:
    return name.strip().lower().replace("-", "_").replace(" ", "_")


def register_strategy(spec: StrategySpec) -> None:
    with _REGISTRY_LOCK:
        _REGISTRY[strategy_key(spec.name)] = spec


def get_strategy(name: str) -> StrategySpec:
    try:
        return _REGISTRY[strategy_key(name)]
    except KeyError:
        raise UnknownStrategy(f"unknown strategy {name!r}; known: {', '.join(sorted(_REGISTRY))}") from None


def strategy_names(enabled_only: bool = True) -> list[str]:
    return sorted(n for n, s in _REGISTRY.items() if s.enabled or not enabled_only)


def document_fields(doc: DocumentContent) -> dict[str, str]:
    s = doc.structural
    return {
        "title": s.title,
        "meta_description": s.meta_description,
        "headings": serialize_headings(s.headings),
        "jsonld_text": s.jsonld_text,
        "body": doc.body,
    }


def render_prompt(strategy: StrategySpec | str, document: DocumentContent, scope: OptimizationScope | str) -> str:
    spec = get_strategy(strategy) if isinstance(strategy, str) else strategy
    if not spec.enabled:
        raise ConfigError(f"strategy {spec.name!r} is disabled: {spec.notes}")
    scope = OptimizationScope(scope)
    values = {**document_fields(document), "scope": scope.directive}
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], spec.prompt_template)


@dataclass(frozen=True)
class ScopedDocument:
    document: DocumentContent
    violations: frozenset[str] = frozenset()


def enforce_scope(original: DocumentContent, candidate: DocumentContent, scope: OptimizationScope | str) -> ScopedDocument:
    """Restore out-of-scope fields from `original`; report which ones the candidate touched."""
    if original.doc_id != candidate.doc_id:
        raise ValueError(f"doc_id mismatch: {original.doc_id!r} vs {candidate.doc_id!r}")
    allowed = OptimizationScope(scope).fields
    orig_f, cand_f = document_fields(original), document_fields(candidate)
    violations = frozenset(f for f in DOC_FIELDS if f not in allowed and orig_f[f] != cand_f[f])
    o, c = original.structural, candidate.structural
    pick = lambda f, a, b: b if f in allowed else a  # noqa: E731
    projected = replace(
        candidate,
        url=original.url,
        structural=StructuralInfo(
            title=pick("title", o.title, c.title),
            meta_description=pick("meta_description", o.meta_description, c.meta_description),
            headings=pick("headings", o.headings, c.headings),
            jsonld_text=pick("jsonld_text", o.jsonld_text, c.jsonld_text),
        ),
        body=pick("body", original.body, candidate.body),
    )
    return ScopedDocument(projected, violations)


def document_from_fields(original: DocumentContent, fields: Mapping[str, Any]) -> DocumentContent:
    """Build a document from backend output; keys the backend omitted keep their original value."""
    cur = document_fields(original)
    get = lambda k: fields[k] if k in fields and fields[k] is not None else cur[k]  # noqa: E731
    headings = get("headings")
    if isinstance(headings, list):
        parsed = tuple(
            (int(h["level"]), normalize(h["text"])) if isinstance(h, Mapping) else (2, normalize(str(h)))
            for h in headings
        )
        parsed = tuple((lv if 1 <= lv <= 6 else 2, t) for lv, t in parsed if t)
    else:
        parsed = parse_headings(str(headings))
    return replace(
        original,
        structural=StructuralInfo(
            title=normalize(str(get("title"))),
            meta_description=normalize(str(get("meta_description"))),
            headings=parsed,
            jsonld_text=normalize(str(get("jsonld_text"))),
        ),
        body=normalize_lines(str(get("body"))),
    )


class Rewriter(Protocol):
    def rewrite(self, prompt: str, fields: dict[str, str], scope: OptimizationScope) -> Mapping[str, Any]:
        """Return rewritten fields (same keys as `fields`)."""


class IdentityRewriter:
    kind = "identity"

    def rewrite(self, prompt, fields, scope):
        return dict(fields)

    def describe(self) -> dict:
        return {"kind": self.kind}


@dataclass
class AppendMarkerRewriter:
    """Test transform: append `marker` to every in-scope field (each heading line for headings)."""

    marker: str = "[opt]"
    kind = "append-marker"

    def rewrite(self, prompt, fields, scope):
        out = dict(fields)
        for f in scope.fields:
            if f == "headings":
                out[f] = "\n".join(f"{line} {self.marker}" for line in fields[f].splitlines())
            else:
                out[f] = f"{fields[f]} {self.marker}".strip()
        return out

    def describe(self) -> dict:
        return {"kind": self.kind, "marker": self.marker}


@dataclass
class TermDropRewriter:
    """Test transform: delete the given words (case-insensitive) from every in-scope field."""

    terms: tuple[str, ...] = ()
    kind = "term-drop"

    def rewrite(self, prompt, fields, scope):
        if not self.terms:
            return dict(fields)
        pattern = re.compile(r"\b(?:" + "|".join(re.escape(t) for t in self.terms) + r")\b", re.IGNORECASE)
        out = dict(fields)
        for f in scope.fields:
            out[f] = pattern.sub("", fields[f])
        return out

    def describe(self) -> dict:
        return {"kind": self.kind, "terms": list(self.terms)}


@dataclass
class ServiceRewriter:
    """External rewriter: ``{prompt, fields, scope}`` -> ``{fields}``.

    When `log_dir` is set, each exchange is appended to ``rewrites.jsonl``.
    """

    endpoint: str
    timeout: float = 300.0
    retries: int = 3
    backoff: float = 1.0
    log_dir: str | Path | None = None
    kind = "external-service"

    def __post_init__(self):
        self._lock = threading.Lock()

    def rewrite(self, prompt, fields, scope):
        request = {"prompt": prompt, "fields": fields, "scope": OptimizationScope(scope).value}
        response = ServiceClient(self.endpoint, self.timeout, self.retries, self.backoff).post(request)
        if self.log_dir is not None:
            path = Path(self.log_dir) / "rewrites.jsonl"
            path.parent.mkdir(parents=True, exist_ok=True)
            with self._lock, path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"request": request, "response": response}, ensure_ascii=False, sort_keys=True) + "\n")
        out = response.get("fields")
        if not isinstance(out, dict):
            raise ServiceError("rewriter response has no 'fields' object")
        return out

    def describe(self) -> dict:
        return {"kind": self.kind, "endpoint": self.endpoint}


def apply_strategy(
    document: DocumentContent,
    strategy: StrategySpec | str,
    scope: OptimizationScope | str,
    backend: Rewriter | None = None,
) -> ScopedDocument:
    spec = get_strategy(strategy) if isinstance(strategy, str) else strategy
    scope = OptimizationScope(scope)
    if strategy_key(spec.name) == "identity":
        return ScopedDocument(document)
    prompt = render_prompt(spec, document, scope)
    backend = backend or IdentityRewriter()
    try:
        fields = backend.rewrite(prompt, document_fields(document), scope)
    except ServiceError as exc:
        raise StageError("optimization", str(exc)) from exc
    candidate = document_from_fields(document, fields)
    return enforce_scope(document, candidate, scope)
