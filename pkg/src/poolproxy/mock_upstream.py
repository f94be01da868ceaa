"""Offline stand-in for the upstream API, used by every integration test.

Enforces per-token hourly budgets with `x-ratelimit-*` headers, rejects
concurrent same-token requests with the upstream's abuse-detection message,
and sleeps per a deterministic endpoint latency profile. Its ledger (call
intervals, budgets, violation counts) is the authoritative oracle the test
suite checks the proxy against.

Limits default to a scaled-down 50 requests per 60 s window so acceptance
runs finish in minutes; the real-scale values (5000/hour) are plain config.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import math
import random
import time
from dataclasses import dataclass, field

from fastapi import FastAPI, Request, Response
from pydantic import BaseModel

from .models import (
    AbuseInjectionRequest,
    BudgetView,
    InvalidateRequest,
    LedgerReport,
    LedgerTokenView,
    MockConfigView,
)

SERVICES = ("rest", "graphql")

ABUSE_MESSAGE = (
    "You have triggered an abuse detection mechanism and have been "
    "temporarily blocked from content creation. Please retry your request "
    "again later"
)

DEFAULT_LATENCY_MS = {
    "issues": 120.0,
    "releases": 60.0,
    "tags": 60.0,
    "stargazers": 30.0,
    "search": 80.0,
}


class MockSettings(BaseModel):
    """Mock configuration; loadable from a JSON file via `model_validate_json`."""

    tokens: list[str]
    limit: int = 50
    graphql_limit: int | None = None
    window_s: float = 60.0
    anon_limit: int = 60
    latency_ms: dict[str, float] = dict(DEFAULT_LATENCY_MS)
    default_latency_ms: float = 20.0
    latency_scale: float = 1.0
    jitter: float = 0.1
    seed: int = 42
    abuse_retry_after_s: float = 1.0
    not_found_segment: str = "missing"

    def limit_for(self, service: str) -> int:
        if service == "graphql" and self.graphql_limit is not None:
            return self.graphql_limit
        return self.limit


def latency_profile(path: str, settings: MockSettings) -> float:
    """Deterministic service time (seconds) for a path: class base + seeded jitter.

    Same (path, seed) always yields the same latency; endpoint classes keep
    their relative ordering (issues slowest, stargazers fastest).
    """
    segments = path.split("?", 1)[0].strip("/").split("/")
    base = settings.default_latency_ms
    for segment in segments:
        if segment in settings.latency_ms:
            base = settings.latency_ms[segment]
            break
    rng = random.Random(f"{settings.seed}:{path}")
    factor = 1.0 + rng.uniform(-settings.jitter, settings.jitter)
    return base * factor * settings.latency_scale / 1000.0


def synthetic_body(path: str, page: int) -> bytes:
    """Deterministic response payload for (path, page); reproducible byte-exactly."""
    bare = path.split("?", 1)[0]
    digest = hashlib.sha256(f"{bare}:{page}".encode()).hexdigest()
    items = [{"id": int(digest[i : i + 8], 16), "node": digest[i : i + 12]} for i in (0, 8, 16, 24, 32)]
    return json.dumps(
        {"path": bare, "page": page, "signature": digest[:16], "items": items},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()


def not_found_body(path: str) -> bytes:
    bare = path.split("?", 1)[0]
    return json.dumps({"message": "Not Found", "path": bare}, sort_keys=True).encode()


def graphql_page(body: bytes) -> int:
    """Stable pseudo-page for a GraphQL POST so bodies stay deterministic."""
    return int(hashlib.sha256(body).hexdigest()[:6], 16) % 1000


@dataclass
class CallRecord:
    token_suffix: str
    service: str
    path: str
    status: int
    start: float
    end: float


@dataclass
class _Budget:
    limit: int
    remaining: int
    reset_at: float = 0.0
    min_observed: int = field(default=-1)


@dataclass
class _TokenState:
    suffix: str
    budgets: dict[str, _Budget]
    in_flight: int = 0
    violations: int = 0
    calls: int = 0


def count_overlaps(calls: list[CallRecord]) -> int:
    """Independent recount of same-token temporal overlaps from call intervals.

    Mirrors the entry-time detector: a call that starts before every
    earlier-started same-token call has ended counts once.
    """
    overlaps = 0
    by_token: dict[str, list[CallRecord]] = {}
    for call in calls:
        by_token.setdefault(call.token_suffix, []).append(call)
    for records in by_token.values():
        records.sort(key=lambda c: c.start)
        latest_end = float("-inf")
        for rec in records:
            if rec.start < latest_end:
                overlaps += 1
            latest_end = max(latest_end, rec.end)
    return overlaps


class MockEngine:
    """All mock state: budgets, in-flight tracking, the append-only ledger."""

    def __init__(self, settings: MockSettings, *, wall=time.time) -> None:
        self.settings = settings
        self._wall = wall
        self.reset_state()

    def reset_state(self) -> None:
        s = self.settings
        self.tokens: dict[str, _TokenState] = {
            tok: _TokenState(
                suffix=tok[-4:],
                budgets={svc: _Budget(s.limit_for(svc), s.limit_for(svc)) for svc in SERVICES},
            )
            for tok in s.tokens
        }
        self.anon = _TokenState(
            suffix="anon",
            budgets={svc: _Budget(s.anon_limit, s.anon_limit) for svc in SERVICES},
        )
        self.invalidated: set[str] = set()
        self.abuse_injections = 0
        self.calls: list[CallRecord] = []
        self.unauthorized = 0
        self.rate_limited = 0
        self.abuse_responses = 0

    # Window boundaries stay integer-aligned so the advertised reset header
    # (whole seconds) equals the real boundary exactly.
    def _fresh_reset(self, now: float) -> float:
        return float(math.floor(now) + math.ceil(self.settings.window_s))

    def _roll_window(self, budget: _Budget, now: float) -> None:
        if now >= budget.reset_at:
            budget.remaining = budget.limit
            budget.reset_at = self._fresh_reset(now)

    def _rate_headers(self, budget: _Budget) -> dict[str, str]:
        return {
            "x-ratelimit-limit": str(budget.limit),
            "x-ratelimit-remaining": str(budget.remaining),
            "x-ratelimit-reset": str(int(math.ceil(budget.reset_at))),
        }

    @staticmethod
    def parse_token(auth_header: str | None) -> str | None:
        if not auth_header:
            return None
        parts = auth_header.split(None, 1)
        if len(parts) == 2 and parts[0].lower() in ("token", "bearer"):
            return parts[1].strip()
        return auth_header.strip()

    async def serve(self, method: str, path: str, auth_header: str | None, body: bytes) -> Response:
        now = self._wall()
        start = now
        service = "graphql" if path.split("?", 1)[0] == "/graphql" else "rest"
        secret = self.parse_token(auth_header)

        if secret is None:
            state = self.anon
        elif secret in self.invalidated or secret not in self.tokens:
            self.unauthorized += 1
            self._log(CallRecord("?", service, path, 401, start, self._wall()))
            return Response(
                content=json.dumps({"message": "Bad credentials"}).encode(),
                status_code=401,
                media_type="application/json",
            )
        else:
            state = self.tokens[secret]

        budget = state.budgets[service]
        self._roll_window(budget, now)

        if state is not self.anon:
            if self.abuse_injections > 0:
                self.abuse_injections -= 1
                return self._abuse_response(state, service, path, start, injected=True)
            if state.in_flight > 0:
                state.violations += 1
                return self._abuse_response(state, service, path, start, injected=False)

        if budget.remaining <= 0:
            self.rate_limited += 1
            headers = self._rate_headers(budget)
            self._log(CallRecord(state.suffix, service, path, 403, start, self._wall()))
            return Response(
                content=json.dumps({"message": "API rate limit exceeded"}).encode(),
                status_code=403,
                media_type="application/json",
                headers=headers,
            )

        # Accepted: commit the budget before the service sleep so the ledger
        # decrements exactly once per accepted call.
        budget.remaining -= 1
        if budget.min_observed < 0 or budget.remaining < budget.min_observed:
            budget.min_observed = budget.remaining
        state.calls += 1
        state.in_flight += 1
        status = 200
        try:
            await asyncio.sleep(latency_profile(path, self.settings))
            bare = path.split("?", 1)[0]
            if self.settings.not_found_segment in bare.strip("/").split("/"):
                status, payload = 404, not_found_body(path)
            else:
                page = graphql_page(body) if service == "graphql" else _page_of(path)
                payload = synthetic_body(path, page)
            headers = self._rate_headers(budget)
            return Response(
                content=payload,
                status_code=status,
                media_type="application/json",
                headers=headers,
            )
        finally:
            state.in_flight -= 1
            self._log(CallRecord(state.suffix, service, path, status, start, self._wall()))

    def _abuse_response(
        self, state: _TokenState, service: str, path: str, start: float, *, injected: bool
    ) -> Response:
        self.abuse_responses += 1
        budget = state.budgets[service]
        headers = self._rate_headers(budget)
        headers["retry-after"] = str(self.settings.abuse_retry_after_s)
        self._log(CallRecord(state.suffix, service, path, 403, start, self._wall()))
        return Response(
            content=json.dumps(
                {"message": ABUSE_MESSAGE, "injected": injected}
            ).encode(),
            status_code=403,
            media_type="application/json",
            headers=headers,
        )

    def _log(self, rec: CallRecord) -> None:
        self.calls.append(rec)

    def invalidate(self, token_suffix: str) -> int:
        hits = [tok for tok in self.tokens if tok.endswith(token_suffix)]
        self.invalidated.update(hits)
        return len(hits)

    def ledger_report(self) -> LedgerReport:
        now = self._wall()
        token_views: list[LedgerTokenView] = []
        min_observed = {svc: -1 for svc in SERVICES}
        violations = 0
        auth_calls = 0
        for state in self.tokens.values():
            budgets = {}
            mins = {}
            for svc, budget in state.budgets.items():
                self._roll_window(budget, now)
                budgets[svc] = BudgetView(
                    limit=budget.limit, remaining=budget.remaining, reset_at=budget.reset_at
                )
                observed = budget.min_observed if budget.min_observed >= 0 else budget.limit
                mins[svc] = observed
                if min_observed[svc] < 0 or observed < min_observed[svc]:
                    min_observed[svc] = observed
            token_views.append(
                LedgerTokenView(
                    suffix=state.suffix,
                    calls=state.calls,
                    violations=state.violations,
                    budgets=budgets,
                    min_remaining_observed=mins,
                )
            )
            violations += state.violations
            auth_calls += state.calls
        return LedgerReport(
            total_calls=len(self.calls),
            authenticated_calls=auth_calls,
            anonymous_calls=self.anon.calls,
            violations=violations,
            rate_limited_responses=self.rate_limited,
            abuse_responses=self.abuse_responses,
            unauthorized_responses=self.unauthorized,
            min_remaining_observed={
                svc: (v if v >= 0 else self.settings.limit_for(svc))
                for svc, v in min_observed.items()
            },
            tokens=token_views,
        )


def _page_of(path: str) -> int:
    if "?" in path:
        for pair in path.split("?", 1)[1].split("&"):
            key, _, value = pair.partition("=")
            if key == "page":
                try:
                    return int(value)
                except ValueError:
                    return 1
    return 1


class InvalidateResponse(BaseModel):
    invalidated: int


class OkResponse(BaseModel):
    ok: bool = True


def create_mock_app(settings: MockSettings) -> FastAPI:
    """Mock upstream ASGI app. Control plane lives under /__mock__/."""
    app = FastAPI(title="mock-upstream", docs_url=None, redoc_url=None, openapi_url=None)
    engine = MockEngine(settings)
    app.state.engine = engine

    @app.get("/__mock__/ledger", response_model=LedgerReport)
    async def ledger() -> LedgerReport:
        return engine.ledger_report()

    @app.post("/__mock__/reset", response_model=OkResponse)
    async def reset() -> OkResponse:
        engine.reset_state()
        return OkResponse()

    @app.post("/__mock__/invalidate", response_model=InvalidateResponse)
    async def invalidate(req: InvalidateRequest) -> InvalidateResponse:
        return InvalidateResponse(invalidated=engine.invalidate(req.token_suffix))

    @app.post("/__mock__/abuse", response_model=OkResponse)
    async def inject_abuse(req: AbuseInjectionRequest) -> OkResponse:
        engine.abuse_injections += req.count
        return OkResponse()

    @app.get("/__mock__/config", response_model=MockConfigView)
    async def config_view() -> MockConfigView:
        s = engine.settings
        return MockConfigView(
            tokens=len(s.tokens),
            limit=s.limit,
            window_s=s.window_s,
            anon_limit=s.anon_limit,
            latency_scale=s.latency_scale,
            seed=s.seed,
        )

    methods = ["GET", "POST", "PUT", "PATCH", "DELETE", "HEAD", "OPTIONS"]

    @app.api_route("/{rest_of_path:path}", methods=methods, include_in_schema=False)
    async def serve(request: Request, rest_of_path: str) -> Response:
        path = "/" + rest_of_path
        if request.url.query:
            path += "?" + request.url.query
        body = await request.body()
        return await engine.serve(request.method, path, request.headers.get("authorization"), body)

    return app
