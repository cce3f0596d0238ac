import pytest

from stagevis.corpus import ingest
from stagevis.errors import StageError
from stagevis.generate import (
    Citation,
    GenerationContext,
    MockGenerator,
    ServiceGenerator,
    assemble_context,
    generate_response,
    parse_citations,
)
from stagevis.index import RankedList
from stagevis.webdoc import DocumentContent, StructuralInfo

DOCS = [
    DocumentContent("a", StructuralInfo("Alpha", "meta a", ((1, "Top"),), "json a"),
                    "Cats sleep a lot. Vitamin d comes from sunlight. Dogs bark."),
    DocumentContent("b", StructuralInfo("Beta", "meta b"), "Fish swim. Daily vitamin d dose is 600 IU for adults."),
    DocumentContent("c", StructuralInfo("Gamma"), "Sunlight helps. Nothing else here."),
]


@pytest.fixture(scope="module")
def snap():
    return ingest(DOCS)


def ctx_for(snap, pids, query="vitamin d dose"):
    return assemble_context(query, RankedList(tuple((p, 1.0) for p in pids)), snap)


def test_context_indices_follow_reranked_order(snap):
    ctx = ctx_for(snap, ["c:0", "a:0", "b:0"])
    assert [(c.index, c.doc_id) for c in ctx.candidates] == [(1, "c"), (2, "a"), (3, "b")]
    assert ctx.candidates[1].headings == "H1 Top"


def test_context_caps_at_k(snapshot, index_set):
    from stagevis.index import rrf_retrieve

    ctx = assemble_context("q", rrf_retrieve("vitamin d dose", index_set, k=30), snapshot, k=10)
    assert [c.index for c in ctx.candidates] == list(range(1, 11))


def test_two_passages_same_document():
    long_doc = DocumentContent("L", StructuralInfo("Long"), " ".join(f"w{i}" for i in range(300)))
    s = ingest([long_doc])
    ctx = assemble_context("w1", RankedList((("L:1", 2.0), ("L:0", 1.0))), s)
    assert [(c.index, c.doc_id, c.passage_id) for c in ctx.candidates] == [(1, "L", "L:1"), (2, "L", "L:0")]


def test_render_is_deterministic_and_hides_jsonld(snap):
    a, b = ctx_for(snap, ["a:0", "b:0"]), ctx_for(snap, ["a:0", "b:0"])
    assert a.render() == b.render()
    assert "json a" not in a.render()
    assert "[1] Title: Alpha" in a.render()
    with_json = assemble_context("q", RankedList((("a:0", 1.0),)), snap, include_jsonld=True)
    assert "json a" in with_json.render()
    assert "jsonld_text" not in a.payload()["candidates"][0]


def test_mock_generator_three_candidates(snap):
    # Max-overlap sentences picked by hand for query {vitamin, d, dose}:
    # a -> "Vitamin d comes from sunlight." (2/3), b -> "Daily vitamin d dose is 600 IU for adults." (3/3),
    # c -> no overlapping sentence is cited... so query "sunlight vitamin" is used instead.
    ctx = ctx_for(snap, ["a:0", "b:0", "c:0"], query="sunlight vitamin")
    resp = generate_response(ctx, MockGenerator())
    assert resp.text == (
        "Vitamin d comes from sunlight. [1] Daily vitamin d dose is 600 IU for adults. [2] Sunlight helps. [3]"
    )
    assert resp.citations == (Citation(1, 1, "a"), Citation(2, 2, "b"), Citation(3, 3, "c"))
    assert resp.quotes[2] == "Daily vitamin d dose is 600 IU for adults."


def test_mock_skips_candidates_without_overlap(snap):
    resp = generate_response(ctx_for(snap, ["a:0", "c:0"], query="vitamin dose"), MockGenerator())
    assert [c.doc_id for c in resp.citations] == ["a"]


def test_single_candidate_cites_one(snap):
    resp = generate_response(ctx_for(snap, ["b:0"]))
    assert [(c.order, c.context_index) for c in resp.citations] == [(1, 1)]


def test_mock_max_sources(snap):
    resp = generate_response(ctx_for(snap, ["a:0", "b:0"], "vitamin"), MockGenerator(max_sources=1))
    assert len(resp.citations) == 1


class Fixed:
    def __init__(self, text):
        self.text = text

    def generate(self, context):
        return {"text": self.text}


def test_backend_without_markers(snap):
    resp = generate_response(ctx_for(snap, ["a:0"]), Fixed("no markers at all"))
    assert resp.citations == () and resp.text == "no markers at all"


def test_empty_context():
    resp = generate_response(GenerationContext("q"))
    assert resp.text == "" and resp.citations == ()


def test_parse_first_appearance(snap):
    ctx = ctx_for(snap, ["a:0", "b:0"])
    parsed = parse_citations("x [2] y [1] z [2]", ctx)
    assert parsed.citations == (Citation(1, 2, "b"), Citation(2, 1, "a"))
    assert parsed.malformed == 0


def test_parse_out_of_range(snap):
    ctx = ctx_for(snap, ["a:0", "b:0", "c:0"])
    parsed = parse_citations("see [7]", ctx)
    assert parsed.citations == () and parsed.malformed == 1
    assert parse_citations("[0] [4] [1]", ctx).malformed == 2


def test_parse_same_doc_dedup():
    long_doc = DocumentContent("L", StructuralInfo(), " ".join(f"w{i}" for i in range(300)))
    other = DocumentContent("M", StructuralInfo(), "m")
    s = ingest([long_doc, other])
    ctx = assemble_context("q", RankedList((("M:0", 3.0), ("L:0", 2.0), ("L:1", 1.0))), s)
    parsed = parse_citations("a [3] b [2] c [1]", ctx)
    assert parsed.citations == (Citation(1, 3, "L"), Citation(2, 1, "M"))


def test_citation_orders_are_contiguous(snapshot, index_set):
    from stagevis.index import rrf_retrieve
    from stagevis.rerank import rerank_candidates

    for q in ("vitamin d dose", "git rebase branch", "gift ideas friend"):
        rr = rerank_candidates(q, rrf_retrieve(q, index_set), snapshot)
        ctx = assemble_context(q, rr, snapshot)
        resp = generate_response(ctx)
        orders = [c.order for c in resp.citations]
        assert orders == list(range(1, len(orders) + 1))
        assert {c.doc_id for c in resp.citations} <= {c.doc_id for c in ctx.candidates}
        assert generate_response(ctx) == resp


def test_service_generator_contract(stub_server, snap):
    srv = stub_server(lambda p: (200, {"text": "Answer [2] and [1] and [9].", "quotes": [{"index": 2, "quote": "q2"}]}))
    ctx = ctx_for(snap, ["a:0", "b:0"])
    resp = generate_response(ctx, ServiceGenerator(srv.url, retries=0))
    assert [c.doc_id for c in resp.citations] == ["b", "a"]
    assert resp.malformed == 1 and resp.quotes == {2: "q2"}
    payload = srv.requests[0]["payload"]
    assert set(payload) == {"query", "candidates", "instructions"}
    assert set(payload["candidates"][0]) == {"index", "title", "meta_description", "headings", "passage"}
    assert "[2]" in payload["instructions"]


def test_service_generator_failure(stub_server, snap):
    srv = stub_server(lambda p: (502, {}))
    with pytest.raises(StageError) as err:
        generate_response(ctx_for(snap, ["a:0"]), ServiceGenerator(srv.url, retries=1, backoff=0.0))
    assert err.value.stage == "generation"
