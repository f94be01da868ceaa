"""Pydantic request/response models for the proxy and mock control endpoints."""

from __future__ import annotations

from pydantic import BaseModel, Field


class BudgetView(BaseModel):
    limit: int
    remaining: int
    reset_at: float = 0.0


class WorkerView(BaseModel):
    id: int
    label: str
    suffix: str = Field(description="last 4 characters of the token, never the full secret")
    status: str
    owned: bool = True
    queue: int = 0
    in_flight: bool = False
    dispatches: int = 0
    cooldown_remaining_s: float = 0.0
    budgets: dict[str, BudgetView]


class PoolStatus(BaseModel):
    workers: list[WorkerView]
    deferred: dict[str, int]
    counters: dict[str, int]
    all_invalid: bool = False
    api: str
    request_interval_ms: int
    request_timeout_ms: int
    min_remaining: int


class ActivitySummary(BaseModel):
    window_s: float
    counts: dict[str, int]
    total: int


class ProxyErrorBody(BaseModel):
    """Machine-readable marker distinguishing proxy faults from upstream faults."""

    proxy_error: str
    detail: str = ""


class LedgerTokenView(BaseModel):
    suffix: str
    calls: int
    violations: int
    budgets: dict[str, BudgetView]
    min_remaining_observed: dict[str, int]


class LedgerReport(BaseModel):
    """Mock upstream's authoritative record: the test oracle."""

    total_calls: int
    authenticated_calls: int
    anonymous_calls: int
    violations: int
    rate_limited_responses: int
    abuse_responses: int
    unauthorized_responses: int
    min_remaining_observed: dict[str, int]
    tokens: list[LedgerTokenView]


class InvalidateRequest(BaseModel):
    token_suffix: str


class AbuseInjectionRequest(BaseModel):
    count: int = 1


class MockConfigView(BaseModel):
    tokens: int
    limit: int
    window_s: float
    anon_limit: int
    latency_scale: float
    seed: int
