"""Aggregate visibility records into delimited tables, a text summary and figures."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from stagevis.corpus import atomic_write_text
from stagevis.evaluate import (
    DEFAULT_METRIC_K_RETRIEVAL,
    REGIONS,
    STAGES,
    VisibilityRecord,
    compute_metrics,
    hit_rate,
    citation_rate,
)
from stagevis.rerank import DEFAULT_K_RERANK

GROUPINGS = {
    "strategy": ("strategy", "scope"),
    "scope": ("scope",),
    "domain": ("domain", "strategy", "scope"),
    "backend": ("backend", "strategy", "scope"),
}
STAGE_METRIC = {"retrieval": "H@{k}", "reranking": "H@{k}", "generation": "Cite"}


@dataclass
class Table:
    name: str
    columns: list[str]
    rows: list[list[Any]] = field(default_factory=list)

    def to_csv(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow(["" if v is None else (f"{v:.6g}" if isinstance(v, float) else v) for v in row])
        return buf.getvalue()

    def as_dicts(self) -> list[dict[str, Any]]:
        return [dict(zip(self.columns, row)) for row in self.rows]


@dataclass
class Report:
    group_by: str
    tables: dict[str, Table]
    summary: str
    failed: int


def read_records(path: str | Path) -> list[VisibilityRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(VisibilityRecord.from_dict(json.loads(line)))
    return out


def _ks(k_retrieval: int, k_rerank: int) -> dict[str, int]:
    return {"retrieval": k_retrieval, "reranking": k_rerank, "generation": k_rerank}


def _baseline_values(records: Sequence[VisibilityRecord], ks: dict[str, int]) -> dict[str, float | None]:
    """Baseline H@k / Cite over distinct instances (one baseline per query and backend)."""
    seen: dict[tuple[str, str], VisibilityRecord] = {}
    for r in records:
        if r.side == "baseline" and r.ok:
            seen.setdefault((r.query_id, r.backend), r)
    base = list(seen.values())
    return {
        "retrieval": hit_rate((r.retrieval_rank for r in base), ks["retrieval"]),
        "reranking": hit_rate((r.reranking_rank for r in base), ks["reranking"]),
        "generation": citation_rate(r.cited for r in base),
    }


def metrics_table(records: Sequence[VisibilityRecord], keys: Sequence[str], ks: dict[str, int], generation_delta: str) -> Table:
    cols = [*keys, "stage", "metric", "k", "n", "baseline", "value", "pct_change", "delta_rank", "delta_n"]
    table = Table("metrics", cols)
    groups: dict[tuple, list[VisibilityRecord]] = defaultdict(list)
    for r in records:
        groups[tuple(getattr(r, k) for k in keys)].append(r)
    for key in sorted(groups):
        for stage in STAGES:
            m = compute_metrics(groups[key], stage, ks[stage], generation_delta)
            table.rows.append([
                *key, stage, STAGE_METRIC[stage].format(k=m.k), m.k, m.n,
                m.baseline, m.value, m.pct_change, m.delta_rank, m.delta_n,
            ])
    return table


def table2(records: Sequence[VisibilityRecord], ks: dict[str, int], generation_delta: str) -> Table:
    """Wide layout: one row per strategy, stage columns repeated per scope, baseline row first."""
    scopes = sorted({r.scope for r in records})
    strategies = sorted({r.strategy for r in records})
    cols = ["strategy"]
    for scope in scopes:
        for stage in STAGES:
            metric = STAGE_METRIC[stage].format(k=ks[stage])
            cols += [f"{scope}:{stage}:{metric}", f"{scope}:{stage}:pct", f"{scope}:{stage}:delta_rank"]
    table = Table("table2", cols)
    base_row: list[Any] = ["baseline"]
    for scope in scopes:
        b = _baseline_values([r for r in records if r.scope == scope], ks)
        for stage in STAGES:
            base_row += [b[stage], None, None]
    table.rows.append(base_row)
    for strategy in strategies:
        row: list[Any] = [strategy]
        for scope in scopes:
            cell = [r for r in records if r.strategy == strategy and r.scope == scope]
            for stage in STAGES:
                if not cell:
                    row += [None, None, None]
                    continue
                m = compute_metrics(cell, stage, ks[stage], generation_delta)
                row += [m.value, m.pct_change, m.delta_rank]
        table.rows.append(row)
    return table


def _stage_rank(r: VisibilityRecord, stage: str) -> float:
    rank = r.rank(stage)
    return math.inf if rank is None else rank


def win_rates(records: Sequence[VisibilityRecord]) -> Table:
    """Per stage, a backend wins an instance iff its optimized rank is strictly the best."""
    table = Table("win_rates", ["strategy", "scope", "stage", "backend", "wins", "instances", "win_rate"])
    inst: dict[tuple[str, str, str], dict[str, VisibilityRecord]] = defaultdict(dict)
    for r in records:
        if r.side == "optimized" and r.ok:
            inst[(r.strategy, r.scope, r.query_id)][r.backend] = r
    cells: dict[tuple[str, str], list[dict[str, VisibilityRecord]]] = defaultdict(list)
    for (strategy, scope, _), by_backend in sorted(inst.items()):
        if len(by_backend) >= 2:
            cells[(strategy, scope)].append(by_backend)
    for (strategy, scope), instances in sorted(cells.items()):
        backends = sorted({b for i in instances for b in i})
        for stage in STAGES:
            wins = dict.fromkeys(backends, 0)
            for by_backend in instances:
                ranks = {b: _stage_rank(r, stage) for b, r in by_backend.items()}
                best = min(ranks.values())
                leaders = [b for b, v in ranks.items() if v == best]
                if len(leaders) == 1 and best != math.inf:
                    wins[leaders[0]] += 1
            for b in backends:
                table.rows.append([strategy, scope, stage, b, wins[b], len(instances), wins[b] / len(instances)])
    return table


def provenance_table(records: Sequence[VisibilityRecord]) -> Table:
    """Where the target's cited quotes came from, per cell and side."""
    table = Table("provenance", ["strategy", "scope", "backend", "side", "region", "quotes", "share"])
    counts: dict[tuple, dict[str, int]] = defaultdict(lambda: dict.fromkeys((*REGIONS, "unmatched"), 0))
    for r in records:
        if r.ok and r.provenance:
            c = counts[(r.strategy, r.scope, r.backend, r.side)]
            for region in r.provenance:
                c[region] = c.get(region, 0) + 1
    for key in sorted(counts):
        total = sum(counts[key].values())
        for region, n in counts[key].items():
            table.rows.append([*key, region, n, n / total])
    return table


def failures_table(records: Sequence[VisibilityRecord]) -> Table:
    table = Table("failures", ["strategy", "scope", "backend", "side", "failed_stage", "count"])
    counts: dict[tuple, int] = defaultdict(int)
    for r in records:
        if not r.ok:
            counts[(r.strategy, r.scope, r.backend, r.side, r.failed_stage or "")] += 1
    for key in sorted(counts):
        table.rows.append([*key, counts[key]])
    return table


def _fmt(v: float | None, spec: str = ".2f") -> str:
    return "-" if v is None else format(v, spec)


def _fmt_pct(v: float | None) -> str:
    return "--%" if v is None else f"{v:+.0%}"


def render_summary(t2: Table, ks: dict[str, int], failed: int, skipped: int = 0) -> str:
    scopes = []
    for c in t2.columns[1:]:
        s = c.split(":")[0]
        if s not in scopes:
            scopes.append(s)
    width = max([len("strategy")] + [len(str(r[0])) for r in t2.rows]) + 2
    out = []
    for si, scope in enumerate(scopes):
        out.append(f"Scope: {scope}")
        head = "strategy".ljust(width)
        for stage in STAGES:
            metric = STAGE_METRIC[stage].format(k=ks[stage])
            head += f"{metric:>6} {'':>5} {'dRank':>7}   "
        out.append(head.rstrip())
        for row in t2.rows:
            vals = row[1 + si * 9: 1 + (si + 1) * 9]
            line = str(row[0]).ljust(width)
            for j in range(3):
                v, p, d = vals[3 * j: 3 * j + 3]
                d_txt = "-" if d is None else f"{d:+.2f}"
                line += f"{_fmt(v):>6} {_fmt_pct(p):>5} {d_txt:>7}   "
            out.append(line.rstrip())
        out.append("")
    out.append(f"failed records (excluded): {failed}")
    if skipped:
        out.append(f"skipped queries: {skipped}")
    return "\n".join(out) + "\n"


def build_report(
    records: Iterable[VisibilityRecord],
    group_by: str = "strategy",
    k_retrieval: int = DEFAULT_METRIC_K_RETRIEVAL,
    k_rerank: int = DEFAULT_K_RERANK,
    generation_delta: str = "cocited",
    skipped: int = 0,
) -> Report:
    if group_by not in GROUPINGS:
        raise ValueError(f"group_by must be one of {sorted(GROUPINGS)}, got {group_by!r}")
    records = sorted(records, key=lambda r: (r.strategy, r.scope, r.backend, r.query_id, r.side))
    ks = _ks(k_retrieval, k_rerank)
    tables = {
        "metrics": metrics_table(records, GROUPINGS[group_by], ks, generation_delta),
        "table2": table2(records, ks, generation_delta),
        "failures": failures_table(records),
    }
    wr = win_rates(records)
    if wr.rows:
        tables["win_rates"] = wr
    prov = provenance_table(records)
    if prov.rows:
        tables["provenance"] = prov
    failed = sum(1 for r in records if not r.ok)
    summary = render_summary(tables["table2"], ks, failed, skipped)
    return Report(group_by, tables, summary, failed)


def render_figures(report: Report, out_dir: str | Path) -> list[Path]:
    from stagevis import plotting

    out_dir = Path(out_dir)
    written = []
    metrics = report.tables["metrics"]
    keys = GROUPINGS[report.group_by]
    rows = metrics.as_dicts()
    labels = sorted({"/".join(str(r[k]) for k in keys) for r in rows})
    if labels:
        lookup = {("/".join(str(r[k]) for k in keys), r["stage"]): r for r in rows}
        series = {s: [lookup[(l, s)]["delta_rank"] for l in labels] for s in STAGES}
        fig, _ = plotting.grouped_bars(labels, series, "mean rank change (+ = up)", "Rank change by stage", plotting.STAGE_COLORS)
        written.append(plotting.save(fig, out_dir / "delta_rank.png"))
        series = {s: [lookup[(l, s)]["pct_change"] for l in labels] for s in STAGES}
        fig, _ = plotting.grouped_bars(labels, series, "relative change vs baseline", "Hit/citation rate change", plotting.STAGE_COLORS)
        written.append(plotting.save(fig, out_dir / "rate_change.png"))

    if report.group_by == "domain" and rows:
        gen = [r for r in rows if r["stage"] == "generation"]
        domains = sorted({r["domain"] for r in gen})
        cells = sorted({f"{r['strategy']}/{r['scope']}" for r in gen})
        val = {(r["domain"], f"{r['strategy']}/{r['scope']}"): r["pct_change"] for r in gen}
        grid = [[val.get((d, c)) for c in cells] for d in domains]
        fig, _ = plotting.heatmap(domains, cells, grid, "citation rate change", "Citation rate change by domain")
        written.append(plotting.save(fig, out_dir / "domain_citation.png"))

    if "win_rates" in report.tables:
        wr = report.tables["win_rates"].as_dicts()
        backends = sorted({r["backend"] for r in wr})
        series = {}
        for b in backends:
            per_stage = []
            for s in STAGES:
                rs = [r for r in wr if r["backend"] == b and r["stage"] == s]
                n = sum(r["instances"] for r in rs)
                per_stage.append(sum(r["wins"] for r in rs) / n if n else None)
            series[b] = per_stage
        fig, _ = plotting.grouped_bars(list(STAGES), series, "win rate", "Optimizer win rate by stage", zero_line=False)
        written.append(plotting.save(fig, out_dir / "win_rates.png"))

    if "provenance" in report.tables:
        pr = report.tables["provenance"].as_dicts()
        regions = [*REGIONS, "unmatched"]
        series = {}
        for side in ("baseline", "optimized"):
            n = {g: sum(r["quotes"] for r in pr if r["side"] == side and r["region"] == g) for g in regions}
            total = sum(n.values())
            if total:
                series[side] = [n[g] / total for g in regions]
        if series:
            fig, _ = plotting.grouped_bars(regions, series, "share of cited quotes", "Citation source by region", zero_line=False)
            written.append(plotting.save(fig, out_dir / "provenance.png"))
    return written


def write_report(report: Report, out_dir: str | Path, delimiter: str = ",", figures: bool = True) -> list[Path]:
    out_dir = Path(out_dir)
    ext = "tsv" if delimiter == "\t" else "csv"
    written = []
    for name, table in report.tables.items():
        path = out_dir / f"{name}.{ext}"
        atomic_write_text(path, table.to_csv(delimiter))
        written.append(path)
    atomic_write_text(out_dir / "summary.txt", report.summary)
    written.append(out_dir / "summary.txt")
    if figures:
        written += render_figures(report, out_dir)
    return written
