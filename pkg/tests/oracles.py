"""Independent reference computations used by the tests.

Nothing here touches the inverted index: scores are recomputed from raw
unit text by direct counting.
"""

import math

from stagevis.corpus import FIELDS
from stagevis.text import terms


def brute_bm25(query, texts, k1=1.2, b=0.75):
    """texts: {passage_id: field text}. Returns {passage_id: score} for score > 0."""
    docs = {pid: terms(t) for pid, t in texts.items()}
    docs = {pid: toks for pid, toks in docs.items() if toks}
    n = len(docs)
    if not n:
        return {}
    avgdl = sum(len(t) for t in docs.values()) / n
    out = {}
    for pid, toks in docs.items():
        total = 0.0
        for q in terms(query):
            df = sum(1 for other in docs.values() if q in other)
            if df == 0:
                continue
            tf = toks.count(q)
            idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
            total += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(toks) / avgdl))
        if total > 0:
            out[pid] = total
    return out


def brute_rank(scores):
    return sorted(scores, key=lambda pid: (-scores[pid], pid))


def brute_rrf(query, snapshot, kappa=60.0, k1=1.2, b=0.75, k=None):
    units = list(snapshot.semantic_units())
    fused = {}
    for name in FIELDS:
        ranking = brute_rank(brute_bm25(query, {u.passage_id: u.elements[name] for u in units}, k1, b))
        for pos, pid in enumerate(ranking, 1):
            fused[pid] = fused.get(pid, 0.0) + 1.0 / (kappa + pos)
    ordered = sorted(fused.items(), key=lambda kv: (-kv[1], kv[0]))
    return ordered[:k] if k else ordered
