"""Benchmark harness: direct-sequential vs parallel-through-proxy collection.

Replays the classic mining workload (issues, releases, tags, stargazers over
N repositories) against the mock upstream in two modes:

* direct  - one sequential request stream per token, 50 ms pause after each
            request, simulated client processing executed inline;
* proxied - three parallel client workers per token, up to six concurrent
            requests each, all through the proxy; processing overlaps with
            requests still in flight.

Both modes issue the identical multiset of paths; correctness rests on the
mock ledger, the timing comparison on the emitted timeline.
"""

from __future__ import annotations

import asyncio
import csv
import logging
import os
import time
from collections import Counter
from dataclasses import dataclass, field

import httpx

logger = logging.getLogger(__name__)

RESOURCES = ("issues", "releases", "tags", "stargazers")
DEFAULT_PROCESSING_S = 0.03
DEFAULT_DIRECT_INTERVAL_S = 0.05
DEFAULT_CLIENTS_PER_TOKEN = 3
DEFAULT_MAX_CONCURRENT = 6


@dataclass(frozen=True)
class CollectionTask:
    """One repository to collect: every resource kind, `pages` pages each."""

    repo: str
    pages: int
    resources: tuple[str, ...] = RESOURCES

    def paths(self) -> list[str]:
        return [
            f"/repos/{self.repo}/{resource}?page={page}&per_page=100"
            for resource in self.resources
            for page in range(1, self.pages + 1)
        ]


def build_tasks(repos: int, pages: int) -> list[CollectionTask]:
    return [CollectionTask(repo=f"org/repo-{i:03d}", pages=pages) for i in range(repos)]


@dataclass
class RequestRecord:
    client: str
    path: str
    status: int
    start: float  # seconds since run start
    end: float


@dataclass
class RunReport:
    mode: str
    tokens: int
    processing_s: float
    wall_s: float = 0.0
    retries: int = 0
    records: list[RequestRecord] = field(default_factory=list)

    def path_multiset(self) -> Counter:
        return Counter(r.path for r in self.records)

    def endpoint_latency_ms(self) -> dict[str, float]:
        sums: dict[str, list[float]] = {}
        for rec in self.records:
            kind = rec.path.split("/")[-1].split("?", 1)[0]
            sums.setdefault(kind, []).append((rec.end - rec.start) * 1000.0)
        return {k: sum(v) / len(v) for k, v in sorted(sums.items())}


def _partition(items: list, buckets: int) -> list[list]:
    out: list[list] = [[] for _ in range(buckets)]
    for i, item in enumerate(items):
        out[i % buckets].append(item)
    return out


async def _collect_one(
    client: httpx.AsyncClient,
    path: str,
    headers: dict[str, str],
    label: str,
    t0: float,
    report: RunReport,
) -> None:
    """Issue one request, retrying after upstream throttling (should not occur)."""
    while True:
        start = time.monotonic() - t0
        response = await client.get(path, headers=headers)
        end = time.monotonic() - t0
        if response.status_code in (403, 429):
            report.retries += 1
            wait = 1.0
            retry_after = response.headers.get("retry-after")
            reset = response.headers.get("x-ratelimit-reset")
            if retry_after:
                wait = float(retry_after)
            elif reset:
                wait = max(0.0, float(reset) - time.time())
            await asyncio.sleep(min(wait, 10.0) + 0.05)
            continue
        report.records.append(RequestRecord(label, path, response.status_code, start, end))
        return


async def run_direct(
    tasks: list[CollectionTask],
    tokens: list[str],
    mock_url: str,
    *,
    interval_s: float = DEFAULT_DIRECT_INTERVAL_S,
    processing_s: float = DEFAULT_PROCESSING_S,
    timeout_s: float = 30.0,
) -> RunReport:
    """Sequential collection straight against the upstream, one stream per token."""
    report = RunReport(mode="direct", tokens=len(tokens), processing_s=processing_s)
    shares = _partition(tasks, len(tokens))
    async with httpx.AsyncClient(base_url=mock_url, timeout=timeout_s) as client:
        t0 = time.monotonic()

        async def stream(token: str, my_tasks: list[CollectionTask], label: str) -> None:
            headers = {"authorization": f"token {token}", "user-agent": "bench-direct"}
            for task in my_tasks:
                for path in task.paths():
                    await _collect_one(client, path, headers, label, t0, report)
                    # Simulated client processing (database write) runs inline,
                    # then the mandated pause before the next request.
                    await asyncio.sleep(processing_s)
                    await asyncio.sleep(interval_s)

        await asyncio.gather(
            *(stream(tok, share, f"direct-{i}") for i, (tok, share) in enumerate(zip(tokens, shares)))
        )
        report.wall_s = time.monotonic() - t0
    return report


async def run_proxied(
    tasks: list[CollectionTask],
    tokens: list[str],
    proxy_url: str,
    *,
    clients_per_token: int = DEFAULT_CLIENTS_PER_TOKEN,
    max_concurrent: int = DEFAULT_MAX_CONCURRENT,
    processing_s: float = DEFAULT_PROCESSING_S,
    timeout_s: float = 60.0,
) -> RunReport:
    """Parallel collection through the proxy; clients carry no tokens at all."""
    report = RunReport(mode="proxied", tokens=len(tokens), processing_s=processing_s)
    n_clients = clients_per_token * len(tokens)
    shares = _partition(tasks, n_clients)
    limits = httpx.Limits(max_connections=n_clients * max_concurrent + 8)
    async with httpx.AsyncClient(base_url=proxy_url, timeout=timeout_s, limits=limits) as client:
        t0 = time.monotonic()

        async def client_proc(my_tasks: list[CollectionTask], label: str) -> None:
            headers = {"user-agent": "bench-proxied"}
            sem = asyncio.Semaphore(max_concurrent)

            async def resource_stream(task: CollectionTask, resource: str) -> None:
                for page in range(1, task.pages + 1):
                    path = f"/repos/{task.repo}/{resource}?page={page}&per_page=100"
                    async with sem:
                        await _collect_one(client, path, headers, label, t0, report)
                    # Processing overlaps with the other resource streams'
                    # requests still in flight.
                    await asyncio.sleep(processing_s)

            for task in my_tasks:
                await asyncio.gather(*(resource_stream(task, r) for r in task.resources))

        await asyncio.gather(
            *(client_proc(share, f"proxied-{i}") for i, share in enumerate(shares))
        )
        report.wall_s = time.monotonic() - t0
    return report


@dataclass
class Comparison:
    direct: RunReport
    proxied: RunReport

    @property
    def speedup(self) -> float:
        return self.direct.wall_s / self.proxied.wall_s if self.proxied.wall_s else float("inf")

    @property
    def workload_equivalent(self) -> bool:
        return self.direct.path_multiset() == self.proxied.path_multiset()


def render_table(cmp: Comparison) -> str:
    lines = [
        f"{'mode':<10}{'requests':>10}{'wall (s)':>12}{'retries':>9}",
        f"{'-' * 41}",
    ]
    for report in (cmp.direct, cmp.proxied):
        lines.append(
            f"{report.mode:<10}{len(report.records):>10}{report.wall_s:>12.2f}{report.retries:>9}"
        )
    lines.append("")
    lines.append(f"speedup (direct/proxied): {cmp.speedup:.2f}x  tokens: {cmp.direct.tokens}")
    lines.append("")
    lines.append(f"{'endpoint':<14}{'direct ms':>12}{'proxied ms':>12}")
    direct_lat = cmp.direct.endpoint_latency_ms()
    proxied_lat = cmp.proxied.endpoint_latency_ms()
    for kind in sorted(set(direct_lat) | set(proxied_lat)):
        lines.append(
            f"{kind:<14}{direct_lat.get(kind, 0.0):>12.1f}{proxied_lat.get(kind, 0.0):>12.1f}"
        )
    return "\n".join(lines)


def write_timeline_csv(path: str, *reports: RunReport) -> None:
    """Plottable request timeline: one row per request, start/end per mode."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "client", "path", "status", "start_s", "end_s", "duration_ms"])
        for report in reports:
            for rec in sorted(report.records, key=lambda r: r.start):
                writer.writerow(
                    [
                        report.mode,
                        rec.client,
                        rec.path,
                        rec.status,
                        f"{rec.start:.4f}",
                        f"{rec.end:.4f}",
                        f"{(rec.end - rec.start) * 1000.0:.2f}",
                    ]
                )


def run_benchmark(
    mode: str,
    *,
    tokens_n: int = 3,
    repos: int = 5,
    pages: int = 3,
    processing_ms: float = 30.0,
    interval_ms: float = 50.0,
    proxy_interval_ms: int = 50,
    latency_scale: float = 1.0,
    seed: int = 42,
    out: str | None = None,
    mock_url: str | None = None,
    proxy_url: str | None = None,
    timeout_s: float = 60.0,
    stream=None,
) -> int:
    """Self-contained benchmark entry point used by the CLI.

    Spins up a mock upstream (and a proxy, for proxied/compare) unless
    external URLs are given. Returns a process exit code: non-zero when the
    proxied run is slower than direct in a multi-token comparison.
    """
    import sys

    from .config import ProxyConfig
    from .mock_upstream import MockSettings, create_mock_app
    from .proxy import create_proxy_app
    from .runtime import BackgroundServer

    stream = stream or sys.stdout
    tokens = [f"bench-token-{i:02d}" for i in range(tokens_n)]
    tasks = build_tasks(repos, pages)
    processing_s = processing_ms / 1000.0
    interval_s = interval_ms / 1000.0

    servers: list[BackgroundServer] = []
    try:
        if mock_url is None:
            settings = MockSettings(
                tokens=tokens,
                limit=1_000_000,
                window_s=3600.0,
                latency_scale=latency_scale,
                seed=seed,
            )
            mock = BackgroundServer(create_mock_app(settings)).start()
            servers.append(mock)
            mock_url = mock.url
        if mode in ("proxied", "compare") and proxy_url is None:
            config = ProxyConfig(
                tokens=tuple(tokens),
                request_interval_ms=proxy_interval_ms,
                request_timeout_ms=int(timeout_s * 1000),
                monitor=False,
                log_file=os.devnull,
                upstream_rest_url=mock_url,
                upstream_graphql_url=mock_url + "/graphql",
            )
            proxy = BackgroundServer(create_proxy_app(config)).start()
            servers.append(proxy)
            proxy_url = proxy.url

        reports: list[RunReport] = []
        exit_code = 0
        if mode in ("direct", "compare"):
            direct = asyncio.run(
                run_direct(
                    tasks, tokens, mock_url,
                    interval_s=interval_s, processing_s=processing_s, timeout_s=timeout_s,
                )
            )
            reports.append(direct)
            stream.write(f"direct: {len(direct.records)} requests in {direct.wall_s:.2f}s\n")
        if mode in ("proxied", "compare"):
            proxied = asyncio.run(
                run_proxied(
                    tasks, tokens, proxy_url,
                    processing_s=processing_s, timeout_s=timeout_s,
                )
            )
            reports.append(proxied)
            stream.write(f"proxied: {len(proxied.records)} requests in {proxied.wall_s:.2f}s\n")
        if mode == "compare":
            cmp = Comparison(direct=reports[0], proxied=reports[1])
            stream.write(render_table(cmp) + "\n")
            if not cmp.workload_equivalent:
                stream.write("WARNING: modes issued different workloads\n")
                exit_code = 1
            if tokens_n >= 2 and cmp.proxied.wall_s > cmp.direct.wall_s:
                stream.write("FAIL: proxied slower than direct with multiple tokens\n")
                exit_code = 1
        if out:
            write_timeline_csv(out, *reports)
            stream.write(f"timeline written to {out}\n")
        return exit_code
    finally:
        for server in servers:
            server.stop()
