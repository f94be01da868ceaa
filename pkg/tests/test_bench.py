"""Benchmark harness: closed-form wall-time oracles, workload equivalence, report."""

from __future__ import annotations

import asyncio
import csv
import io
import statistics

import pytest

from conftest import TOKENS, engine_of
from poolproxy.bench import (
    CollectionTask,
    Comparison,
    build_tasks,
    render_table,
    run_benchmark,
    run_direct,
    run_proxied,
    write_timeline_csv,
)

FLAT30 = dict(
    latency_ms={"issues": 30.0, "releases": 30.0, "tags": 30.0, "stargazers": 30.0},
    jitter=0.0,
    limit=1_000_000,
    window_s=3600.0,
)


def test_tasks_enumerate_every_resource_and_page():
    tasks = build_tasks(repos=2, pages=3)
    paths = [p for t in tasks for p in t.paths()]
    assert len(paths) == 2 * 4 * 3
    assert len(set(paths)) == len(paths)
    assert any("issues" in p for p in paths) and any("stargazers" in p for p in paths)


def test_direct_single_token_wall_time_matches_closed_form(run_mock):
    # 10 requests x (30 ms latency + 30 ms processing + 50 ms pause) ~= 1.1 s.
    mock = run_mock(**FLAT30)
    tasks = [CollectionTask(repo="org/solo", pages=10, resources=("tags",))]
    report = asyncio.run(
        run_direct(tasks, [TOKENS[0]], mock.url, interval_s=0.05, processing_s=0.03)
    )
    assert len(report.records) == 10
    assert report.wall_s == pytest.approx(1.1, rel=0.10)
    assert engine_of(mock).ledger_report().violations == 0
    assert report.retries == 0


def test_direct_multi_token_wall_is_the_largest_share(run_mock):
    # 6 repos x 4 resources over 3 tokens: 8 requests per stream, run in parallel.
    mock = run_mock(**FLAT30)
    tasks = build_tasks(repos=6, pages=1)
    report = asyncio.run(
        run_direct(tasks, list(TOKENS), mock.url, interval_s=0.05, processing_s=0.03)
    )
    per_stream = 8 * (0.030 + 0.030 + 0.050)
    assert report.wall_s == pytest.approx(per_stream, rel=0.20)
    assert len(report.records) == 24
    assert engine_of(mock).ledger_report().violations == 0


def test_both_modes_issue_the_identical_workload(run_mock, run_proxy):
    mock = run_mock(**FLAT30)
    proxy = run_proxy(mock, request_interval_ms=10)
    tasks = build_tasks(repos=3, pages=2)
    direct = asyncio.run(run_direct(tasks, list(TOKENS), mock.url, interval_s=0.01,
                                    processing_s=0.005))
    proxied = asyncio.run(run_proxied(tasks, list(TOKENS), proxy.url, processing_s=0.005))
    cmp = Comparison(direct=direct, proxied=proxied)
    assert cmp.workload_equivalent
    assert len(direct.records) == len(proxied.records) == 3 * 4 * 2
    assert engine_of(mock).ledger_report().violations == 0


def test_proxied_client_durations_exceed_service_latency(run_mock, run_proxy):
    # Queueing at the worker makes client-observed durations longer than the
    # mock's service time; throughput still wins via parallelism.
    mock = run_mock(**FLAT30)
    proxy = run_proxy(mock, tokens=(TOKENS[0],), request_interval_ms=10)
    tasks = build_tasks(repos=3, pages=2)
    report = asyncio.run(run_proxied(tasks, [TOKENS[0]], proxy.url, processing_s=0.005))
    durations = [(r.end - r.start) for r in report.records]
    assert statistics.fmean(durations) > 0.030
    assert max(durations) > 0.060  # someone sat in the queue
    assert engine_of(mock).ledger_report().violations == 0


def test_timeline_csv_has_one_row_per_request(tmp_path, run_mock):
    mock = run_mock(**FLAT30)
    tasks = build_tasks(repos=1, pages=2)
    report = asyncio.run(
        run_direct(tasks, [TOKENS[0]], mock.url, interval_s=0.0, processing_s=0.0)
    )
    out = tmp_path / "timeline.csv"
    write_timeline_csv(str(out), report)
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(report.records) == 8
    assert set(rows[0]) == {"mode", "client", "path", "status", "start_s", "end_s", "duration_ms"}
    assert all(float(r["end_s"]) >= float(r["start_s"]) for r in rows)
    starts = [float(r["start_s"]) for r in rows]
    assert starts == sorted(starts)


def test_render_table_reports_speedup_and_endpoints():
    from poolproxy.bench import RequestRecord, RunReport

    direct = RunReport(mode="direct", tokens=3, processing_s=0.03, wall_s=10.0)
    proxied = RunReport(mode="proxied", tokens=3, processing_s=0.03, wall_s=5.0)
    for report in (direct, proxied):
        report.records.append(RequestRecord("c0", "/repos/o/r/issues?page=1", 200, 0.0, 0.1))
    table = render_table(Comparison(direct=direct, proxied=proxied))
    assert "2.00x" in table
    assert "issues" in table
    assert "direct" in table and "proxied" in table


def test_self_contained_benchmark_compare_exits_zero(tmp_path):
    # Inline processing and the inter-request pause dominate direct mode here,
    # so the proxied win is structural, not timing noise.
    out = tmp_path / "report.csv"
    stream = io.StringIO()
    code = run_benchmark(
        "compare",
        tokens_n=2,
        repos=4,
        pages=1,
        processing_ms=25.0,
        interval_ms=40.0,
        proxy_interval_ms=10,
        latency_scale=0.5,
        out=str(out),
        timeout_s=30.0,
        stream=stream,
    )
    assert code == 0
    text = stream.getvalue()
    assert "speedup" in text
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * (4 * 4 * 1)  # both modes in one timeline
    assert {r["mode"] for r in rows} == {"direct", "proxied"}
