"""HTML -> structural fields + body text.

Boilerplate handling is deliberately conservative: script, style, nav,
footer, noscript and template subtrees and HTML comments are dropped,
everything else visible is body. Heading text lives only in the headings field, not in the body.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Iterable

from bs4 import BeautifulSoup, Comment

from stagevis.errors import InputDecodeError
from stagevis.text import normalize, normalize_lines

HEADING_TAGS = ("h1", "h2", "h3", "h4", "h5", "h6")
_BOILERPLATE = ("script", "style", "nav", "footer", "noscript", "template")
_BLOCK_TAGS = (
    "p", "div", "li", "ul", "ol", "br", "tr", "td", "th", "table", "section",
    "article", "main", "aside", "header", "blockquote", "pre", "dd", "dt",
    "figcaption", "form", "hr",
)
_HEADING_LINE = re.compile(r"^H([1-6]) ?(.*)$")


@dataclass(frozen=True)
class StructuralInfo:
    title: str = ""
    meta_description: str = ""
    headings: tuple[tuple[int, str], ...] = ()
    jsonld_text: str = ""

    def __post_init__(self):
        object.__setattr__(self, "headings", tuple((int(lv), str(t)) for lv, t in self.headings))
        for level, _ in self.headings:
            if not 1 <= level <= 6:
                raise ValueError(f"heading level out of range: {level}")


@dataclass(frozen=True)
class DocumentContent:
    doc_id: str
    structural: StructuralInfo = field(default_factory=StructuralInfo)
    body: str = ""
    url: str | None = None

    def to_record(self) -> dict[str, Any]:
        """Corpus-file record (one JSON object per line)."""
        s = self.structural
        return {
            "doc_id": self.doc_id,
            "url": self.url,
            "title": s.title,
            "meta_description": s.meta_description,
            "headings": [{"level": lv, "text": t} for lv, t in s.headings],
            "jsonld_text": s.jsonld_text,
            "body": self.body,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "DocumentContent":
        headings = tuple((int(h["level"]), normalize(h["text"])) for h in rec.get("headings") or ())
        return cls(
            doc_id=str(rec["doc_id"]),
            url=rec.get("url"),
            structural=StructuralInfo(
                title=normalize(rec.get("title") or ""),
                meta_description=normalize(rec.get("meta_description") or ""),
                headings=headings,
                jsonld_text=normalize(rec.get("jsonld_text") or ""),
            ),
            body=normalize_lines(rec.get("body") or ""),
        )


def _leaves(value: Any) -> Iterable[str]:
    if isinstance(value, dict):
        for key, child in value.items():
            yield str(key)
            yield from _leaves(child)
    elif isinstance(value, list):
        for child in value:
            yield from _leaves(child)
    elif isinstance(value, bool) or value is None:
        return
    elif isinstance(value, (str, int, float)):
        yield str(value)


def flatten_jsonld(blocks: list[Any]) -> str:
    """Depth-first keys and string/number leaves, space separated.

    >>> flatten_jsonld([{"name": "Vitamin D Guide", "year": 2010}])
    'name Vitamin D Guide year 2010'
    """
    return normalize(" ".join(_leaves(list(blocks))))


def serialize_headings(headings: Iterable[tuple[int, str]]) -> str:
    return "\n".join(f"H{level} {text}" for level, text in headings)


def parse_headings(text: str, default_level: int = 2) -> tuple[tuple[int, str], ...]:
    """Inverse of `serialize_headings`.

    Lines that lack an ``H<n>`` marker become `default_level` headings, so
    free-form text returned by a rewriting backend still yields valid
    headings.
    """
    out = []
    for line in text.splitlines():
        line = normalize(line)
        if not line:
            continue
        m = _HEADING_LINE.match(line)
        if m and m.group(2):
            out.append((int(m.group(1)), m.group(2)))
        else:
            out.append((default_level, line))
    return tuple(out)


def _decode(raw: str | bytes) -> str:
    if isinstance(raw, str):
        return raw
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InputDecodeError(f"input is not valid UTF-8: {exc}") from None


def parse_html(raw: str | bytes, doc_id: str, url: str | None = None) -> DocumentContent:
    """Extract title, meta description, headings, JSON-LD and body text.

    Never fails on malformed markup; only undecodable bytes are rejected.
    """
    text = _decode(raw)
    if not text.strip():
        return DocumentContent(doc_id=doc_id, url=url)
    soup = BeautifulSoup(text, "html.parser")

    title_tag = soup.find("title")
    title = normalize(title_tag.get_text()) if title_tag else ""

    meta_description = ""
    for meta in soup.find_all("meta"):
        if str(meta.get("name", "")).strip().lower() == "description":
            meta_description = normalize(str(meta.get("content", "")))
            break

    blocks = []
    for script in soup.find_all("script"):
        if str(script.get("type", "")).strip().lower() != "application/ld+json":
            continue
        try:
            blocks.append(json.loads(script.string or script.get_text()))
        except (json.JSONDecodeError, TypeError):
            continue
    jsonld_text = flatten_jsonld(blocks)

    for node in soup.find_all(string=lambda s: isinstance(s, Comment)):
        node.extract()
    for tag in soup.find_all(_BOILERPLATE):
        tag.decompose()
    for tag in soup.find_all(["head", "title", "meta"]):
        tag.decompose()

    headings = []
    for tag in soup.find_all(HEADING_TAGS):
        if tag.decomposed:
            continue
        heading = normalize(tag.get_text(" "))
        if heading:
            headings.append((int(tag.name[1]), heading))
        tag.decompose()

    for tag in soup.find_all(_BLOCK_TAGS):
        tag.insert_before("\n")
        tag.insert_after("\n")
    body = normalize_lines(soup.get_text())

    return DocumentContent(
        doc_id=doc_id,
        url=url,
        structural=StructuralInfo(
            title=title,
            meta_description=meta_description,
            headings=tuple(headings),
            jsonld_text=jsonld_text,
        ),
        body=body,
    )
