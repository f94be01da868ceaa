"""HTTP front door: classify, normalize, forward, relay.

A single catch-all route accepts any method/path, hands the request to the
token pool, and relays the upstream response byte-exactly. Control endpoints
live under the reserved ``/__proxy__/`` prefix; everything else is forwarded.
"""

from __future__ import annotations

import asyncio
import logging
import math
import sys
from contextlib import asynccontextmanager

import httpx
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from .config import ProxyConfig
from .models import ActivitySummary, BudgetView, PoolStatus, ProxyErrorBody, WorkerView
from .observability import ActivityLog, ActivityRecord, status_class_for
from .scheduler import (
    ForwardResult,
    OutcomeKind,
    PendingRequest,
    ProxyOutcome,
    RequestEnvelope,
    ServiceKind,
    TokenPool,
    TokenWorker,
    WorkerStatus,
)

logger = logging.getLogger(__name__)

GRAPHQL_PATH = "/graphql"

# Hop-by-hop and transport-managed headers are never forwarded verbatim.
_REQUEST_DROP = {
    "host",
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
    "content-length",
}
_RESPONSE_DROP = {
    "connection",
    "keep-alive",
    "transfer-encoding",
    "upgrade",
    "content-length",
    "content-encoding",
    "date",
    "server",
}
_RATE_HEADERS = ("x-ratelimit-limit", "x-ratelimit-remaining", "x-ratelimit-reset")
WORKER_HEADER = "x-pool-worker"


def classify_service(path: str, method: str = "GET", graphql_path: str = GRAPHQL_PATH) -> ServiceKind:
    """GraphQL iff the path equals the GraphQL endpoint path exactly; else REST."""
    bare = path.split("?", 1)[0]
    return ServiceKind.GRAPHQL if bare == graphql_path else ServiceKind.REST


def normalize_request(
    envelope: RequestEnvelope, worker_secret: str | None, default_user_agent: str
) -> RequestEnvelope:
    """Fill authorization and user-agent when absent; everything else passes through.

    Idempotent: normalizing an already-normalized envelope changes nothing.
    """
    headers = list(envelope.headers)
    if worker_secret is not None and envelope.header("authorization") is None:
        headers.append(("authorization", f"token {worker_secret}"))
    if envelope.header("user-agent") is None:
        headers.append(("user-agent", default_user_agent))
    return envelope.replace_headers(headers)


class UpstreamTargets:
    """Absolute upstream bases, one per service kind; tests point them at the mock."""

    def __init__(self, rest_base: str, graphql_url: str) -> None:
        self.rest_base = rest_base.rstrip("/")
        self.graphql_url = graphql_url.rstrip("/")

    def url_for(self, service: ServiceKind, path: str) -> str:
        if service is ServiceKind.GRAPHQL:
            query = path.split("?", 1)[1] if "?" in path else ""
            return self.graphql_url + (f"?{query}" if query else "")
        return self.rest_base + path


async def forward(
    client: httpx.AsyncClient, url: str, envelope: RequestEnvelope, timeout_s: float
) -> ForwardResult:
    """One upstream exchange; aborts at the timeout, never raises."""
    headers = [(k, v) for k, v in envelope.headers if k.lower() not in _REQUEST_DROP]
    try:
        response = await client.request(
            envelope.method,
            url,
            headers=headers,
            content=envelope.body or None,
            timeout=timeout_s,
        )
    except httpx.TimeoutException:
        return ForwardResult(kind="timeout", detail=f"no upstream response within {timeout_s}s")
    except httpx.HTTPError as exc:
        return ForwardResult(kind="unreachable", detail=str(exc) or type(exc).__name__)
    return ForwardResult(
        kind="ok",
        status=response.status_code,
        headers=tuple(response.headers.multi_items()),
        body=response.content,
    )


def _passthrough_response(fr: ForwardResult) -> Response:
    if fr.kind == "timeout":
        return _proxy_error(504, "timeout", fr.detail)
    if fr.kind == "unreachable":
        return _proxy_error(502, "upstream_unreachable", fr.detail)
    return _relay(fr.status, fr.headers, fr.body, worker="passthrough")


def _proxy_error(status: int, marker: str, detail: str = "", retry_after_s: float | None = None) -> Response:
    headers = {}
    if retry_after_s is not None:
        headers["retry-after"] = str(max(0, math.ceil(retry_after_s)))
    return JSONResponse(
        ProxyErrorBody(proxy_error=marker, detail=detail).model_dump(),
        status_code=status,
        headers=headers,
    )


def _relay(
    status: int,
    upstream_headers: tuple[tuple[str, str], ...],
    body: bytes,
    *,
    worker: str,
    aggregate: tuple[int, int, float | None] | None = None,
) -> Response:
    """Relay an upstream response byte-exactly, with the pool-aggregate
    rate-limit view substituted for the single token's when requested."""
    response = Response(content=body, status_code=status)
    kept = [(k, v) for k, v in upstream_headers if k.lower() not in _RESPONSE_DROP]
    if aggregate is not None and any(k.lower() in _RATE_HEADERS for k, v in kept):
        limit, remaining, reset = aggregate
        kept = [(k, v) for k, v in kept if k.lower() not in _RATE_HEADERS]
        kept.append(("x-ratelimit-limit", str(limit)))
        kept.append(("x-ratelimit-remaining", str(remaining)))
        if reset is not None:
            kept.append(("x-ratelimit-reset", str(int(math.ceil(reset)))))
    kept.append((WORKER_HEADER, worker))
    raw = [(k.lower().encode(), v.encode()) for k, v in kept]
    raw.append((b"content-length", str(len(body)).encode()))
    response.raw_headers = raw
    return response


def outcome_to_response(outcome: ProxyOutcome, pool: TokenPool, service: ServiceKind) -> Response:
    if outcome.kind is OutcomeKind.UPSTREAM:
        return _relay(
            outcome.status,
            outcome.headers,
            outcome.body,
            worker=outcome.worker or "-",
            aggregate=pool.aggregate(service),
        )
    if outcome.kind is OutcomeKind.TIMEOUT:
        return _proxy_error(504, "timeout", outcome.detail)
    if outcome.kind is OutcomeKind.UNREACHABLE:
        return _proxy_error(502, "upstream_unreachable", outcome.detail)
    if outcome.kind is OutcomeKind.QUEUE_FULL:
        return _proxy_error(503, "queue_full", "per-worker queue cap reached")
    return _proxy_error(503, "pool_exhausted", outcome.detail, retry_after_s=outcome.retry_after_s)


def _strip_scheme(auth_header: str) -> str:
    parts = auth_header.split(None, 1)
    if len(parts) == 2 and parts[0].lower() in ("token", "bearer"):
        return parts[1].strip()
    return auth_header.strip()


def pool_status_model(pool: TokenPool, config: ProxyConfig) -> PoolStatus:
    workers = []
    for snap in pool.snapshot():
        workers.append(
            WorkerView(
                id=snap.worker_id,
                label=snap.label,
                suffix=snap.secret_suffix,
                status=snap.status.value,
                owned=snap.owned,
                queue=snap.queue_len,
                in_flight=snap.in_flight,
                dispatches=snap.dispatches,
                cooldown_remaining_s=snap.cooldown_remaining_s,
                budgets={
                    kind.value: BudgetView(
                        limit=snap.limit[kind],
                        remaining=snap.remaining[kind],
                        reset_at=snap.reset_at[kind],
                    )
                    for kind in ServiceKind
                },
            )
        )
    return PoolStatus(
        workers=workers,
        deferred={k.value: v for k, v in pool.deferred_depth().items()},
        counters=pool.counters.as_dict(),
        all_invalid=pool.all_invalid,
        api=config.api.value,
        request_interval_ms=config.request_interval_ms,
        request_timeout_ms=config.request_timeout_ms,
        min_remaining=config.min_remaining,
    )


def monitor_summary(status: PoolStatus, counts: dict[str, int], window_s: float, now_epoch: float):
    """Assemble the monitor frame's data from the control-plane models."""
    from .observability import WorkerRow, build_summary

    rows = []
    for w in status.workers:
        rows.append(
            WorkerRow(
                label=w.label,
                suffix=w.suffix,
                status=w.status if w.owned else f"{w.status} (unowned)",
                queue_len=w.queue,
                in_flight=w.in_flight,
                remaining={k: b.remaining for k, b in w.budgets.items()},
                limit={k: b.limit for k, b in w.budgets.items()},
                reset_in_s={
                    k: max(0.0, b.reset_at - now_epoch) if b.reset_at > 0 else 0.0
                    for k, b in w.budgets.items()
                },
                cooldown_remaining_s=w.cooldown_remaining_s,
                dispatches=w.dispatches,
            )
        )
    return build_summary(
        counts,
        rows,
        status.deferred,
        window_s=window_s,
        accepted=status.counters.get("accepted", 0),
        resolved=status.counters.get("resolved", 0),
        api=status.api,
    )


def create_proxy_app(config: ProxyConfig, *, monitor_stream=None) -> FastAPI:
    """Build the proxy ASGI app. The pool starts with the app's lifespan."""

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if config.log_file:
            sink = open(config.log_file, "a", encoding="utf-8")  # noqa: SIM115 - closed below
        else:
            sink = sys.stderr
        activity = ActivityLog(sink=sink)
        client = httpx.AsyncClient(
            limits=httpx.Limits(max_connections=256, max_keepalive_connections=64),
            timeout=config.timeout_s,
        )
        targets = UpstreamTargets(config.upstream_rest_url, config.upstream_graphql_url)

        async def scheduled_forward(worker: TokenWorker, req: PendingRequest) -> ForwardResult:
            envelope = normalize_request(req.envelope, worker.secret, config.user_agent)
            url = targets.url_for(req.service, envelope.path)
            return await forward(client, url, envelope, config.timeout_s)

        pool = TokenPool(
            config.tokens,
            interval_s=config.interval_s,
            timeout_s=config.timeout_s,
            min_remaining=config.min_remaining,
            queue_cap=config.queue_cap,
            assumed_limit=config.assumed_limit,
            forwarder=scheduled_forward,
            on_record=activity.record,
        )
        app.state.pool = pool
        app.state.activity = activity
        app.state.client = client
        app.state.targets = targets
        app.state.passthrough_count = 0
        await pool.start()

        coordinator = None
        if config.clustering:
            from .cluster import start_coordinator

            coordinator = await start_coordinator(config, pool)
            app.state.coordinator = coordinator

        monitor_task = None
        if monitor_stream is not None:
            from .observability import render_monitor

            async def run_monitor() -> None:
                import time as _time

                while True:
                    await asyncio.sleep(1.0)
                    status = pool_status_model(pool, config)
                    counts = activity.summarize(60.0)
                    frame = render_monitor(monitor_summary(status, counts, 60.0, _time.time()))
                    monitor_stream.write("\x1b[2J\x1b[H" + frame + "\n")
                    monitor_stream.flush()

            monitor_task = asyncio.create_task(run_monitor())

        try:
            yield
        finally:
            if monitor_task is not None:
                monitor_task.cancel()
            if coordinator is not None:
                await coordinator.aclose()
            await pool.aclose()
            await client.aclose()
            if sink is not sys.stderr:
                sink.close()

    app = FastAPI(
        title="poolproxy", lifespan=lifespan, docs_url=None, redoc_url=None, openapi_url=None
    )
    app.state.config = config

    @app.get("/__proxy__/healthz")
    async def healthz() -> dict:
        return {"status": "ok"}

    @app.get("/__proxy__/status", response_model=PoolStatus)
    async def status() -> PoolStatus:
        return pool_status_model(app.state.pool, config)

    @app.get("/__proxy__/summary", response_model=ActivitySummary)
    async def summary(window_s: float = 60.0) -> ActivitySummary:
        counts = app.state.activity.summarize(window_s)
        return ActivitySummary(window_s=window_s, counts=counts, total=sum(counts.values()))

    methods = ["GET", "POST", "PUT", "PATCH", "DELETE", "HEAD", "OPTIONS"]

    @app.api_route("/{rest_of_path:path}", methods=methods, include_in_schema=False)
    async def handle_client_request(request: Request, rest_of_path: str) -> Response:
        path = "/" + rest_of_path
        if request.url.query:
            path += "?" + request.url.query
        body = await request.body()
        headers = tuple(
            (k.decode("latin-1"), v.decode("latin-1")) for k, v in request.headers.raw
        )
        envelope = RequestEnvelope(request.method, path, headers, body)
        service = classify_service(path, request.method)
        pool: TokenPool = request.app.state.pool

        pinned: TokenWorker | None = None
        auth = envelope.header("authorization")
        if auth is not None:
            worker = pool.match_token(_strip_scheme(auth))
            if worker is None or worker.status is WorkerStatus.INVALID:
                # Unknown (or dead) credentials: unscheduled pass-through lane,
                # exempt from pacing and excluded from pool accounting.
                logger.warning(
                    "pass-through request %s %s (token not in pool)", request.method, path
                )
                request.app.state.passthrough_count += 1
                normalized = normalize_request(envelope, None, config.user_agent)
                url = request.app.state.targets.url_for(service, path)
                fr = await forward(request.app.state.client, url, normalized, config.timeout_s)
                response = _passthrough_response(fr)
                _record_passthrough(request.app.state.activity, envelope, service, fr)
                return response
            pinned = worker

        outcome = await pool.submit(envelope, service, pinned=pinned)
        return outcome_to_response(outcome, pool, service)

    return app


def _record_passthrough(
    activity: ActivityLog, envelope: RequestEnvelope, service: ServiceKind, fr: ForwardResult
) -> None:
    import time as _time

    kind = {"ok": "upstream"}.get(fr.kind, fr.kind)
    activity.record(
        ActivityRecord(
            ts=_time.time(),
            worker="passthrough",
            service=service.value,
            method=envelope.method,
            path=envelope.path.split("?", 1)[0],
            status=fr.status,
            status_class=status_class_for(kind, fr.status),
            latency_ms=0.0,
            queue_len=0,
        )
    )
