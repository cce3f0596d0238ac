import random

import pytest

from handset import EXPECTED, four_records, record
from stagevis.report import GROUPINGS, Table, build_report, read_records, win_rates, write_report


def _row(table, **match):
    rows = [r for r in table.as_dicts() if all(r[k] == v for k, v in match.items())]
    assert len(rows) == 1, rows
    return rows[0]


def test_table2_one_row_plus_baseline():
    t2 = build_report(four_records()).tables["table2"]
    assert [r[0] for r in t2.rows] == ["baseline", "fluency"]
    row = t2.as_dicts()[1]
    assert row["body:retrieval:H@20"] == 0.75
    assert row["body:retrieval:pct"] == pytest.approx(0.5)
    assert row["body:retrieval:delta_rank"] == pytest.approx(23.0)
    assert row["body:generation:delta_rank"] == pytest.approx(1.0)
    base = t2.as_dicts()[0]
    assert (base["body:retrieval:H@20"], base["body:reranking:H@10"], base["body:generation:Cite"]) == (0.5, 0.75, 0.5)


@pytest.mark.parametrize("stage", ["retrieval", "reranking", "generation"])
def test_metrics_table_handset(stage):
    m = build_report(four_records()).tables["metrics"]
    row = _row(m, stage=stage)
    e = EXPECTED[stage]
    assert row["baseline"] == pytest.approx(e["baseline"])
    assert row["value"] == pytest.approx(e["value"])
    assert row["pct_change"] == pytest.approx(e["pct"])
    assert row["delta_rank"] == pytest.approx(e["delta_rank"])


def test_summary_text():
    summary = build_report(four_records()).summary
    assert "Scope: body" in summary
    assert "+50%" in summary and "+23.00" in summary
    assert "failed records (excluded): 0" in summary


def test_win_rates_strict_best():
    recs = [
        record("q1", "optimized", (3, 2, None), backend="A"),
        record("q1", "optimized", (5, 2, None), backend="B"),
    ]
    t = win_rates(recs)
    got = {(r["backend"], r["stage"]): r["win_rate"] for r in t.as_dicts()}
    assert [got[("A", s)] for s in ("retrieval", "reranking", "generation")] == [1.0, 0.0, 0.0]
    assert [got[("B", s)] for s in ("retrieval", "reranking", "generation")] == [0.0, 0.0, 0.0]


def test_win_rates_absent_for_single_backend():
    assert "win_rates" not in build_report(four_records()).tables


def test_report_shuffle_invariant():
    recs = four_records() + four_records(scope="both", strategy="statistics")
    ref = build_report(recs)
    rng = random.Random(11)
    for _ in range(5):
        rng.shuffle(recs)
        other = build_report(recs)
        assert other.summary == ref.summary
        assert {n: t.to_csv() for n, t in other.tables.items()} == {n: t.to_csv() for n, t in ref.tables.items()}


@pytest.mark.parametrize("group_by", sorted(GROUPINGS))
def test_groupings(group_by):
    recs = four_records() + four_records(domain="tech", backend="other")
    m = build_report(recs, group_by).tables["metrics"]
    assert m.columns[: len(GROUPINGS[group_by])] == list(GROUPINGS[group_by])


def test_unknown_grouping():
    with pytest.raises(ValueError):
        build_report(four_records(), "nope")


def test_failures_counted():
    recs = four_records()
    recs[3] = type(recs[3]).from_dict({**recs[3].to_dict(), "status": "failed", "failed_stage": "optimization"})
    rep = build_report(recs)
    assert rep.failed == 1
    assert rep.tables["failures"].rows == [["fluency", "body", "identity", "optimized", "optimization", 1]]


def test_csv_and_tsv():
    t = Table("x", ["a", "b"], [[1, 0.5], [None, "s"]])
    assert t.to_csv() == "a,b\n1,0.5\n,s\n"
    assert t.to_csv("\t") == "a\tb\n1\t0.5\n\ts\n"


def test_write_report_with_figures(tmp_path):
    recs = four_records() + four_records(backend="B", domain="tech")
    paths = write_report(build_report(recs, "domain"), tmp_path)
    names = {p.name for p in paths}
    assert {"metrics.csv", "table2.csv", "summary.txt", "delta_rank.png", "rate_change.png",
            "domain_citation.png", "win_rates.png"} <= names
    for p in paths:
        assert p.stat().st_size > 0
    assert (tmp_path / "delta_rank.png").read_bytes()[:4] == b"\x89PNG"


def test_read_records_roundtrip(tmp_path):
    import json

    recs = four_records()
    path = tmp_path / "r.jsonl"
    path.write_text("".join(json.dumps(r.to_dict()) + "\n" for r in recs) + "\n")
    assert read_records(path) == recs


def test_win_rates_three_backends_one_dominant():
    recs = []
    for q in ("q1", "q2", "q3"):
        recs.append(record(q, "optimized", (1, 1, 1), backend="A"))
        recs.append(record(q, "optimized", (4, 3, 2), backend="B"))
        recs.append(record(q, "optimized", (9, 6, None), backend="C"))
    got = {(r["backend"], r["stage"]): r["win_rate"] for r in win_rates(recs).as_dicts()}
    for stage in ("retrieval", "reranking", "generation"):
        assert (got[("A", stage)], got[("B", stage)], got[("C", stage)]) == (1.0, 0.0, 0.0)


def test_provenance_table_and_figure(tmp_path):
    recs = four_records()
    recs[0] = type(recs[0]).from_dict({**recs[0].to_dict(), "provenance": ["body", "title"]})
    recs[1] = type(recs[1]).from_dict({**recs[1].to_dict(), "provenance": ["body"]})
    rep = build_report(recs)
    rows = {(r["side"], r["region"]): (r["quotes"], r["share"]) for r in rep.tables["provenance"].as_dicts()}
    assert rows[("baseline", "body")] == (1, 0.5) and rows[("baseline", "title")] == (1, 0.5)
    assert rows[("optimized", "body")] == (1, 1.0) and rows[("optimized", "jsonld")] == (0, 0.0)
    paths = write_report(rep, tmp_path)
    assert "provenance.png" in {p.name for p in paths}
