"""Text normalization and tokenization shared by every stage."""

from __future__ import annotations

import re
import unicodedata

_WS = re.compile(r"\s+")
# Unicode letters and digits; underscore is excluded on purpose.
_TERM = re.compile(r"[^\W_]+")
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def normalize(text: str) -> str:
    """NFKC-normalize and collapse all whitespace runs to one space."""
    if not text:
        return ""
    return _WS.sub(" ", unicodedata.normalize("NFKC", text)).strip()


def normalize_lines(text: str) -> str:
    """Like `normalize`, but keeps line breaks; blank lines are dropped."""
    if not text:
        return ""
    text = unicodedata.normalize("NFKC", text)
    lines = (_WS.sub(" ", line).strip() for line in text.splitlines())
    return "\n".join(line for line in lines if line)


def word_tokens(text: str) -> list[str]:
    """Whitespace-delimited tokens used for chunking."""
    return unicodedata.normalize("NFKC", text).split()


def terms(text: str) -> list[str]:
    """Index/query terms: lowercase alphanumeric runs, no stemming or stopwords."""
    if not text:
        return []
    return _TERM.findall(unicodedata.normalize("NFKC", text).lower())


def sentences(text: str) -> list[str]:
    """Split on sentence-final punctuation or line breaks."""
    out = []
    for line in text.splitlines():
        out.extend(s.strip() for s in _SENTENCE_END.split(line) if s.strip())
    return out
