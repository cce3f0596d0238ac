import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stagevis.errors import ConfigError, StageError, UnknownStrategy
from stagevis.optimize import (
    STAGE_AWARE_BLOCKS,
    AppendMarkerRewriter,
    OptimizationScope,
    ServiceRewriter,
    StrategySpec,
    apply_strategy,
    autogeo_strategy,
    document_fields,
    document_from_fields,
    enforce_scope,
    get_strategy,
    render_prompt,
    strategy_names,
)
from stagevis.webdoc import DocumentContent, StructuralInfo

DOC = DocumentContent(
    "doc",
    StructuralInfo("Vitamin D Guide", "How much vitamin d you need", ((1, "Vitamin D"), (2, "Dose")), "Article Vitamin D"),
    "Vitamin d supports bones.\nAdults need 600 IU daily.",
    url="https://example.org/vd",
)


class Rogue:
    """Rewrites every field no matter the scope."""

    def rewrite(self, prompt, fields, scope):
        return {k: "X " + v if v else "X" for k, v in fields.items()}


def test_identity_is_noop():
    for scope in OptimizationScope:
        out = apply_strategy(DOC, "identity", scope, Rogue())
        assert out.document == DOC and out.violations == frozenset()


def test_append_marker_structural_leaves_body():
    out = apply_strategy(DOC, "fluency", "structural", AppendMarkerRewriter()).document
    assert out.body == DOC.body
    assert out.structural.title == "Vitamin D Guide [opt]"
    assert out.structural.headings == ((1, "Vitamin D [opt]"), (2, "Dose [opt]"))
    assert out.structural.jsonld_text.endswith("[opt]")


def test_append_marker_body_scope():
    out = apply_strategy(DOC, "fluency", "body", AppendMarkerRewriter()).document
    assert out.structural == DOC.structural
    assert out.body == DOC.body + " [opt]"


def test_rogue_backend_scoped_back():
    body = apply_strategy(DOC, "statistics", "body", Rogue())
    assert body.document.structural == DOC.structural and body.document.body.startswith("X ")
    assert body.violations == frozenset({"title", "meta_description", "headings", "jsonld_text"})
    struct = apply_strategy(DOC, "statistics", "structural", Rogue())
    assert struct.document.body == DOC.body and struct.violations == frozenset({"body"})
    both = apply_strategy(DOC, "statistics", "both", Rogue())
    assert both.violations == frozenset()
    orig = document_fields(DOC)
    assert all(v != orig[f] for f, v in document_fields(both.document).items())


def test_enforce_scope_examples():
    cand = DocumentContent("doc", StructuralInfo("New title", DOC.structural.meta_description,
                                                 DOC.structural.headings, DOC.structural.jsonld_text), "new body")
    out = enforce_scope(DOC, cand, "body")
    assert out.document.structural.title == "Vitamin D Guide" and out.document.body == "new body"
    assert out.violations == {"title"}
    out = enforce_scope(DOC, cand, OptimizationScope.STRUCTURAL)
    assert out.document.body == DOC.body and out.document.structural.title == "New title"
    assert out.violations == {"body"}
    assert out.document.url == DOC.url
    with pytest.raises(ValueError):
        enforce_scope(DOC, DocumentContent("other", StructuralInfo(), ""), "body")


def test_stage_aware_blocks_in_order():
    prompt = render_prompt("stage_aware", DOC, "both")
    positions = [prompt.index(block) for block in STAGE_AWARE_BLOCKS]
    assert positions == sorted(positions)
    assert "Vitamin d supports bones." in prompt and "H2 Dose" in prompt


def test_render_is_deterministic_and_complete():
    for name in strategy_names():
        for scope in OptimizationScope:
            a, b = render_prompt(name, DOC, scope), render_prompt(name, DOC, scope)
            assert a == b and "{{" not in a
            assert scope.directive in a


def test_scope_directive_differs():
    assert len({render_prompt("fluency", DOC, s) for s in OptimizationScope}) == 3


def test_registry_lookup():
    assert get_strategy("Stage-Aware").name == "stage_aware"
    with pytest.raises(UnknownStrategy):
        get_strategy("nope")
    names = strategy_names()
    assert "autogeo" not in names and "autogeo" in strategy_names(enabled_only=False)
    assert len([n for n in names if n not in {"identity", "all_in_one", "stage_aware"}]) == 8


def test_autogeo_disabled_until_rules():
    with pytest.raises(ConfigError):
        render_prompt("autogeo", DOC, "body")
    with pytest.raises(ConfigError):
        autogeo_strategy(["  ", ""])
    spec = autogeo_strategy(["Lead with the answer.", "Use numbered lists."])
    assert "- Lead with the answer." in render_prompt(spec, DOC, "body")


def test_unknown_placeholder_rejected():
    with pytest.raises(ConfigError):
        StrategySpec("bad", "{{title}} {{author}}")


def test_document_from_fields_partial_and_list_headings():
    out = document_from_fields(DOC, {"title": "  New   Title ", "headings": [{"level": 3, "text": "A"}, "B", {"level": 9, "text": "C"}]})
    assert out.structural.title == "New Title"
    assert out.structural.headings == ((3, "A"), (2, "B"), (2, "C"))
    assert out.body == DOC.body and out.structural.meta_description == DOC.structural.meta_description


def test_service_rewriter_contract(stub_server, tmp_path):
    srv = stub_server(lambda p: (200, {"fields": {**p["fields"], "body": "rewritten body"}}))
    out = apply_strategy(DOC, "fluency", "body", ServiceRewriter(srv.url, retries=0, log_dir=tmp_path))
    assert out.document.body == "rewritten body"
    payload = srv.requests[0]["payload"]
    assert set(payload) == {"prompt", "fields", "scope"} and payload["scope"] == "body"
    assert payload["fields"] == document_fields(DOC)
    logged = [json.loads(line) for line in (tmp_path / "rewrites.jsonl").read_text().splitlines()]
    assert len(logged) == 1 and logged[0]["response"]["fields"]["body"] == "rewritten body"


def test_service_rewriter_bad_response(stub_server):
    srv = stub_server(lambda p: (200, {"nothing": 1}))
    with pytest.raises(StageError) as err:
        apply_strategy(DOC, "fluency", "body", ServiceRewriter(srv.url, retries=0))
    assert err.value.stage == "optimization"


_field_text = st.text(alphabet="abc xyz", max_size=30)


@given(st.fixed_dictionaries({k: _field_text for k in ("title", "meta_description", "jsonld_text", "body")}),
       st.sampled_from(list(OptimizationScope)))
@settings(max_examples=60, deadline=None)
def test_scope_law_property(new, scope):
    class Fixed:
        def rewrite(self, prompt, fields, scope):
            return {**fields, **new}

    out = apply_strategy(DOC, "fluency", scope, Fixed()).document
    orig, got = document_fields(DOC), document_fields(out)
    for f in orig:
        if f not in scope.fields:
            assert got[f] == orig[f]
