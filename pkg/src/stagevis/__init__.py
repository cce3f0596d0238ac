"""Stage-level visibility evaluation for search-augmented generative engines.

A retrieve -> rerank -> generate pipeline over structurally annotated web
documents, plus a harness that measures how rewriting one document moves it
at each stage.
"""

from stagevis.corpus import CorpusSnapshot, Passage, SemanticUnit, chunk_body, ingest, replace_document
from stagevis.index import FieldIndexSet, RankedList, build_field_indexes, field_rank, rrf_retrieve
from stagevis.webdoc import DocumentContent, StructuralInfo, parse_html

__version__ = "0.1.0"

__all__ = [
    "CorpusSnapshot",
    "DocumentContent",
    "FieldIndexSet",
    "Passage",
    "RankedList",
    "SemanticUnit",
    "StructuralInfo",
    "build_field_indexes",
    "chunk_body",
    "field_rank",
    "ingest",
    "parse_html",
    "replace_document",
    "rrf_retrieve",
]
