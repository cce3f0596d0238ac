"""Documents, passages, semantic units and immutable corpus snapshots."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from stagevis.errors import ConfigError, DocumentNotFound, IngestError
from stagevis.text import word_tokens
from stagevis.webdoc import DocumentContent, serialize_headings

DEFAULT_CHUNK_SIZE = 256
DEFAULT_CHUNK_OVERLAP = 64

FIELDS = ("title", "meta_description", "headings", "jsonld_text", "passage")
STRUCTURAL_FIELDS = FIELDS[:4]

CORPUS_FILE = "corpus.jsonl"
MANIFEST_FILE = "manifest.json"


@dataclass(frozen=True)
class ChunkConfig:
    size: int = DEFAULT_CHUNK_SIZE
    overlap: int = DEFAULT_CHUNK_OVERLAP

    def __post_init__(self):
        if self.size < 1 or not 0 <= self.overlap < self.size:
            raise ConfigError(
                f"chunk size/overlap must satisfy 0 <= overlap < size, got size={self.size} overlap={self.overlap}"
            )

    @property
    def stride(self) -> int:
        return self.size - self.overlap


@dataclass(frozen=True)
class Passage:
    passage_id: str
    doc_id: str
    seq_index: int
    text: str
    token_span: tuple[int, int]


@dataclass(frozen=True)
class SemanticUnit:
    passage_id: str
    elements: dict[str, str]


def passage_id_for(doc_id: str, seq_index: int) -> str:
    return f"{doc_id}:{seq_index}"


def chunk_spans(n_tokens: int, size: int = DEFAULT_CHUNK_SIZE, overlap: int = DEFAULT_CHUNK_OVERLAP) -> list[tuple[int, int]]:
    """Token spans of the sliding window over a body of `n_tokens` tokens.

    Windows start at multiples of ``size - overlap``; the last window is the
    first one whose end reaches the body length.
    """
    stride = ChunkConfig(size, overlap).stride
    spans = []
    start = 0
    while start < n_tokens:
        end = min(start + size, n_tokens)
        spans.append((start, end))
        if end >= n_tokens:
            break
        start += stride
    return spans


def chunk_body(
    body: str,
    size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_CHUNK_OVERLAP,
    doc_id: str = "",
) -> list[Passage]:
    tokens = word_tokens(body)
    return [
        Passage(
            passage_id=passage_id_for(doc_id, i),
            doc_id=doc_id,
            seq_index=i,
            text=" ".join(tokens[start:end]),
            token_span=(start, end),
        )
        for i, (start, end) in enumerate(chunk_spans(len(tokens), size, overlap))
    ]


def structural_elements(doc: DocumentContent) -> dict[str, str]:
    s = doc.structural
    return {
        "title": s.title,
        "meta_description": s.meta_description,
        "headings": serialize_headings(s.headings),
        "jsonld_text": s.jsonld_text,
    }


def build_semantic_units(doc: DocumentContent, passages: Iterable[Passage]) -> list[SemanticUnit]:
    shared = structural_elements(doc)
    units = []
    for p in passages:
        if p.doc_id != doc.doc_id:
            raise ValueError(f"passage {p.passage_id} does not belong to {doc.doc_id}")
        units.append(SemanticUnit(p.passage_id, {**shared, "passage": p.text}))
    return units


def _digest(*parts: str) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()[:16]


def _record_json(doc: DocumentContent) -> str:
    return json.dumps(doc.to_record(), ensure_ascii=False, sort_keys=True)


@dataclass(frozen=True, eq=True)
class CorpusSnapshot:
    """Immutable corpus: documents and their passages keyed by id.

    Both mappings are ordered by doc_id (then seq_index) regardless of the
    order documents were supplied in.
    """

    snapshot_id: str
    chunk: ChunkConfig
    documents: dict[str, DocumentContent] = field(default_factory=dict)
    passages: dict[str, Passage] = field(default_factory=dict)

    __hash__ = None  # type: ignore[assignment]

    def __len__(self) -> int:
        return len(self.documents)

    def passages_of(self, doc_id: str) -> list[Passage]:
        return [p for p in self.passages.values() if p.doc_id == doc_id]

    def semantic_units(self) -> Iterator[SemanticUnit]:
        for doc_id, doc in self.documents.items():
            yield from build_semantic_units(doc, self.passages_of(doc_id))

    def doc_of(self, passage_id: str) -> str:
        return self.passages[passage_id].doc_id


def _assemble(documents: dict[str, DocumentContent], chunk: ChunkConfig, snapshot_id: str) -> CorpusSnapshot:
    ordered = {doc_id: documents[doc_id] for doc_id in sorted(documents)}
    passages: dict[str, Passage] = {}
    for doc_id, doc in ordered.items():
        for p in chunk_body(doc.body, chunk.size, chunk.overlap, doc_id=doc_id):
            passages[p.passage_id] = p
    return CorpusSnapshot(snapshot_id=snapshot_id, chunk=chunk, documents=ordered, passages=passages)


def ingest(documents: Iterable[DocumentContent], chunk: ChunkConfig | None = None) -> CorpusSnapshot:
    chunk = chunk or ChunkConfig()
    by_id: dict[str, DocumentContent] = {}
    for doc in documents:
        if doc.doc_id in by_id:
            raise IngestError(f"duplicate doc_id: {doc.doc_id!r}")
        by_id[doc.doc_id] = doc
    snapshot_id = _digest(
        f"{chunk.size}/{chunk.overlap}", *(_record_json(by_id[d]) for d in sorted(by_id))
    )
    return _assemble(by_id, chunk, snapshot_id)


def replace_document(snapshot: CorpusSnapshot, doc_id: str, new: DocumentContent) -> CorpusSnapshot:
    """New snapshot with one document swapped out; `snapshot` is untouched.

    The new id is derived from the parent id and the edit, so it always
    differs from the parent even when the content does not change.
    """
    if doc_id not in snapshot.documents:
        raise DocumentNotFound(doc_id)
    if new.doc_id != doc_id:
        raise ValueError(f"replacement doc_id {new.doc_id!r} != {doc_id!r}")
    chunk = snapshot.chunk
    passages = {pid: p for pid, p in snapshot.passages.items() if p.doc_id != doc_id}
    for p in chunk_body(new.body, chunk.size, chunk.overlap, doc_id=doc_id):
        passages[p.passage_id] = p
    ordered_passages = dict(
        sorted(passages.items(), key=lambda kv: (kv[1].doc_id, kv[1].seq_index))
    )
    documents = dict(snapshot.documents)
    documents[doc_id] = new
    return CorpusSnapshot(
        snapshot_id=_digest(snapshot.snapshot_id, "replace", doc_id, _record_json(new)),
        chunk=chunk,
        documents=documents,
        passages=ordered_passages,
    )


# -- persistence ---------------------------------------------------------


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temp file in the same directory, then rename over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_corpus(documents: Iterable[DocumentContent]) -> str:
    return "".join(_record_json(doc) + "\n" for doc in documents)


def write_corpus(path: str | os.PathLike, documents: Iterable[DocumentContent]) -> None:
    atomic_write_text(path, dumps_corpus(documents))


_REQUIRED_KEYS = ("doc_id", "title", "meta_description", "headings", "jsonld_text", "body")


def read_corpus(path: str | os.PathLike) -> list[DocumentContent]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise IngestError(f"{path}:{lineno}: record is not an object")
            missing = [k for k in _REQUIRED_KEYS if k not in rec]
            if missing:
                raise IngestError(f"{path}:{lineno}: missing keys {missing}")
            try:
                docs.append(DocumentContent.from_record(rec))
            except (KeyError, TypeError, ValueError) as exc:
                raise IngestError(f"{path}:{lineno}: bad record ({exc})") from None
    return docs


def save_snapshot(snapshot: CorpusSnapshot, directory: str | os.PathLike) -> Path:
    directory = Path(directory)
    write_corpus(directory / CORPUS_FILE, snapshot.documents.values())
    manifest = {
        "snapshot_id": snapshot.snapshot_id,
        "chunk": {"size": snapshot.chunk.size, "overlap": snapshot.chunk.overlap},
        "record_count": len(snapshot.documents),
        "passage_count": len(snapshot.passages),
    }
    atomic_write_text(directory / MANIFEST_FILE, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_snapshot(directory: str | os.PathLike) -> CorpusSnapshot:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST_FILE).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise IngestError(f"no {MANIFEST_FILE} in {directory}") from None
    chunk = ChunkConfig(**manifest["chunk"])
    docs = read_corpus(directory / CORPUS_FILE)
    if len(docs) != manifest["record_count"]:
        raise IngestError(
            f"{directory}: manifest says {manifest['record_count']} records, corpus has {len(docs)}"
        )
    snapshot = ingest(docs, chunk)
    return CorpusSnapshot(
        snapshot_id=manifest["snapshot_id"], chunk=chunk,
        documents=snapshot.documents, passages=snapshot.passages,
    )
