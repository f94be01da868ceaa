"""Token-pool scheduler: per-token workers, queueing, pacing, budgets, balancing.

Each access token gets one worker that owns a strict FIFO queue and never has
more than one request in flight. A three-rule balancer assigns incoming
requests to workers; requests that no worker can currently take wait in a
per-service deferred pool until a budget resets or a cooldown expires.

All async machinery lives in :class:`TokenPool`; the worker and the balancer
are plain synchronous state so they can be unit-tested with fake clocks.
"""

from __future__ import annotations

import asyncio
import enum
import logging
import time
from collections import deque
from collections.abc import Awaitable, Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass

from .observability import ActivityRecord, status_class_for

logger = logging.getLogger(__name__)

DEFAULT_ASSUMED_LIMIT = 5000
DEFAULT_ABUSE_COOLDOWN_S = 60.0
DEFAULT_SWEEP_INTERVAL_S = 0.025

# Marker the upstream puts in the body when it temporarily blocks a token for
# issuing concurrent/unspaced requests.
ABUSE_BODY_MARKER = b"abuse detection"


class ServiceKind(enum.Enum):
    """Upstream service a request targets. Budgets are tracked per kind."""

    REST = "rest"
    GRAPHQL = "graphql"


class WorkerStatus(enum.Enum):
    ACTIVE = "active"
    INVALID = "invalid"
    ABUSE_COOLDOWN = "abuse_cooldown"


class OutcomeKind(enum.Enum):
    """Terminal result classes for a client request."""

    UPSTREAM = "upstream"          # relayed upstream response (any status)
    TIMEOUT = "timeout"
    UNREACHABLE = "unreachable"
    QUEUE_FULL = "queue_full"
    POOL_EXHAUSTED = "pool_exhausted"


class EmptyPoolError(RuntimeError):
    """The pool was built or queried with zero workers (configuration error)."""


class WorkerInvalidError(RuntimeError):
    """Enqueue attempted on a worker whose token was rejected upstream."""


@dataclass
class RateBudget:
    """Mirror of the upstream `x-ratelimit-*` state for one (token, service).

    `reset_at` is epoch seconds; 0.0 means "never observed yet".
    `observed_at` (epoch) orders budget views across proxy instances.
    """

    limit: int
    remaining: int
    reset_at: float = 0.0
    observed_at: float = 0.0


@dataclass(frozen=True)
class RequestEnvelope:
    """Client request as accepted by the proxy. `path` includes the query string."""

    method: str
    path: str
    headers: tuple[tuple[str, str], ...] = ()
    body: bytes = b""

    def header(self, name: str) -> str | None:
        name = name.lower()
        for key, value in self.headers:
            if key.lower() == name:
                return value
        return None

    def replace_headers(self, headers: Iterable[tuple[str, str]]) -> "RequestEnvelope":
        return RequestEnvelope(self.method, self.path, tuple(headers), self.body)


@dataclass(frozen=True)
class ProxyOutcome:
    """What the client ultimately receives for one accepted request."""

    kind: OutcomeKind
    status: int = 0
    headers: tuple[tuple[str, str], ...] = ()
    body: bytes = b""
    worker: str | None = None
    latency_ms: float = 0.0
    queue_len: int = 0
    retry_after_s: float | None = None
    detail: str = ""


@dataclass(frozen=True)
class ForwardResult:
    """Raw result of one upstream forward attempt, produced by the HTTP layer."""

    kind: str  # "ok" | "timeout" | "unreachable"
    status: int = 0
    headers: tuple[tuple[str, str], ...] = ()
    body: bytes = b""
    detail: str = ""


class Signal(enum.Enum):
    """Scheduler-relevant classification of an upstream response."""

    OK = "ok"
    INVALID_TOKEN = "invalid_token"
    ABUSE = "abuse"
    RATE_LIMITED = "rate_limited"


def _header(headers: Iterable[tuple[str, str]], name: str) -> str | None:
    name = name.lower()
    for key, value in headers:
        if key.lower() == name:
            return value
    return None


def interpret_response(
    status: int, headers: Iterable[tuple[str, str]], body: bytes
) -> tuple[Signal, float | None]:
    """Classify an upstream response into a scheduler signal.

    Returns (signal, retry_after_seconds). 401 means the token itself is bad.
    403/429 splits into abuse detection (abuse body text or a retry-after
    header) versus plain budget exhaustion (`x-ratelimit-remaining: 0`); any
    other 403 is a normal response and is relayed untouched.
    """
    if status == 401:
        return Signal.INVALID_TOKEN, None
    if status in (403, 429):
        headers = tuple(headers)
        retry_after = _header(headers, "retry-after")
        if ABUSE_BODY_MARKER in body.lower() or retry_after is not None:
            try:
                return Signal.ABUSE, float(retry_after) if retry_after else None
            except ValueError:
                return Signal.ABUSE, None
        if _header(headers, "x-ratelimit-remaining") == "0":
            return Signal.RATE_LIMITED, None
    return Signal.OK, None


class PendingRequest:
    """A client request queued at a worker, with a one-shot completion handle."""

    __slots__ = (
        "envelope",
        "service",
        "enqueued_at",
        "deadline",
        "client_pinned",
        "attempts",
        "outcome",
        "_on_resolve",
    )

    def __init__(
        self,
        envelope: RequestEnvelope,
        service: ServiceKind,
        enqueued_at: float,
        deadline: float,
        client_pinned: bool = False,
    ) -> None:
        self.envelope = envelope
        self.service = service
        self.enqueued_at = enqueued_at
        self.deadline = deadline        # fixed at enqueue time, never moves
        self.client_pinned = client_pinned
        self.attempts = 0
        self.outcome: ProxyOutcome | None = None
        self._on_resolve: Callable[["PendingRequest"], None] | None = None

    @property
    def resolved(self) -> bool:
        return self.outcome is not None

    def resolve(self, outcome: ProxyOutcome) -> None:
        if self.outcome is not None:
            raise AssertionError("PendingRequest resolved twice")
        self.outcome = outcome
        if self._on_resolve is not None:
            self._on_resolve(self)


class TokenWorker:
    """State for one access token: FIFO queue, pacing clock, budgets, status.

    At most one request is in flight per worker at any instant; the pool's
    per-worker dispatch loop is the queue's single consumer.
    """

    def __init__(self, wid: int, secret: str, assumed_limit: int = DEFAULT_ASSUMED_LIMIT):
        self.id = wid
        self.secret = secret
        self.queue: deque[PendingRequest] = deque()
        self.in_flight = False
        self.last_dispatch_at = float("-inf")
        self.budgets: dict[ServiceKind, RateBudget] = {
            kind: RateBudget(limit=assumed_limit, remaining=assumed_limit) for kind in ServiceKind
        }
        self.status = WorkerStatus.ACTIVE
        self.cooldown_until = 0.0
        self.owned = True               # cluster mode may park a worker it does not own
        self.dispatch_times: list[float] = []
        self.block_hint_s: float | None = None
        self.wake: asyncio.Event | None = None   # created by the pool once a loop exists
        self.on_expire: Callable[[PendingRequest], None] = self._default_expire

    @property
    def label(self) -> str:
        return f"w{self.id}"

    @property
    def secret_suffix(self) -> str:
        return self.secret[-4:]

    @staticmethod
    def _default_expire(req: PendingRequest) -> None:
        req.resolve(ProxyOutcome(kind=OutcomeKind.TIMEOUT, detail="deadline expired in queue"))

    def enqueue(self, req: PendingRequest) -> int:
        """Append at the tail; returns the queue position (0-based)."""
        if self.status is WorkerStatus.INVALID:
            raise WorkerInvalidError(f"{self.label} token rejected upstream")
        self.queue.append(req)
        return len(self.queue) - 1

    def dispatch_next(
        self,
        now: float,
        *,
        interval_s: float,
        min_remaining: int = 0,
        wall_now: float = 0.0,
    ) -> PendingRequest | None:
        """Pop the head iff the worker may dispatch right now.

        Eligibility: not in flight, pacing interval elapsed since the last
        dispatch, status ACTIVE (an expired cooldown flips back here), and the
        head's service budget above the reserve floor. Queued requests whose
        deadline has passed are completed with a timeout and skipped. Sets
        `block_hint_s` to a suggested wait when returning None.
        """
        self.block_hint_s = None
        if self.status is WorkerStatus.ABUSE_COOLDOWN:
            if now >= self.cooldown_until:
                self.status = WorkerStatus.ACTIVE
            else:
                self.block_hint_s = self.cooldown_until - now
                return None
        if self.status is not WorkerStatus.ACTIVE or not self.owned:
            return None
        while self.queue and now > self.queue[0].deadline:
            expired = self.queue.popleft()
            self.on_expire(expired)
        if not self.queue or self.in_flight:
            return None
        elapsed = now - self.last_dispatch_at
        if elapsed < interval_s:
            self.block_hint_s = interval_s - elapsed
            return None
        head = self.queue[0]
        budget = self.budgets[head.service]
        if budget.remaining <= min_remaining:
            if budget.reset_at > 0.0 and wall_now:
                self.block_hint_s = max(budget.reset_at - wall_now, 0.0)
            return None
        self.queue.popleft()
        self.in_flight = True
        self.last_dispatch_at = now
        self.dispatch_times.append(now)
        return head

    def complete_exchange(self) -> None:
        """Mark the in-flight request finished. Completing an idle worker is a bug."""
        if not self.in_flight:
            raise AssertionError(f"{self.label}: complete() with no request in flight")
        self.in_flight = False

    def update_budget(
        self,
        service: ServiceKind,
        limit_hdr: str | int | None,
        remaining_hdr: str | int | None,
        reset_hdr: str | float | None,
        *,
        observed_at: float,
        fallback_decrement: bool = True,
    ) -> bool:
        """Adopt the upstream's rate-limit view for `service`.

        Missing or unparseable headers fall back to a pessimistic local
        decrement (never overspend on incomplete information). Returns True
        when the headers were usable.
        """
        budget = self.budgets[service]
        try:
            limit = int(limit_hdr)          # type: ignore[arg-type]
            remaining = int(remaining_hdr)  # type: ignore[arg-type]
            reset_at = float(reset_hdr)     # type: ignore[arg-type]
        except (TypeError, ValueError):
            if fallback_decrement:
                budget.remaining = max(0, budget.remaining - 1)
                budget.observed_at = observed_at
                logger.warning(
                    "%s: rate-limit headers missing/unparseable for %s; decremented locally to %d",
                    self.label,
                    service.value,
                    budget.remaining,
                )
            return False
        budget.limit = limit
        budget.remaining = max(0, remaining)
        budget.reset_at = reset_at
        budget.observed_at = observed_at
        return True

    def force_exhausted(self, service: ServiceKind, observed_at: float) -> None:
        budget = self.budgets[service]
        budget.remaining = 0
        budget.observed_at = observed_at

    def handle_reset(self, wall_now: float) -> bool:
        """Restore budgets whose reset time has passed. Returns True if any changed."""
        changed = False
        for budget in self.budgets.values():
            if budget.remaining < budget.limit and 0.0 < budget.reset_at <= wall_now:
                budget.remaining = budget.limit
                budget.observed_at = wall_now
                changed = True
        return changed

    def mark_abuse(self, now: float, retry_after_s: float) -> None:
        """Park the worker until the upstream's cooldown elapses."""
        self.status = WorkerStatus.ABUSE_COOLDOWN
        self.cooldown_until = now + retry_after_s

    def mark_invalid(self) -> list[PendingRequest]:
        """Permanently retire the worker; returns its queue for re-balancing."""
        self.status = WorkerStatus.INVALID
        drained = list(self.queue)
        self.queue.clear()
        return drained

    def effective_status(self, now: float) -> WorkerStatus:
        if self.status is WorkerStatus.ABUSE_COOLDOWN and now >= self.cooldown_until:
            return WorkerStatus.ACTIVE
        return self.status


@dataclass(frozen=True)
class WorkerSnapshot:
    """Point-in-time view of one worker, the balancer's only input."""

    worker_id: int
    label: str
    status: WorkerStatus
    owned: bool
    queue_len: int
    in_flight: bool
    remaining: Mapping[ServiceKind, int]
    limit: Mapping[ServiceKind, int]
    reset_at: Mapping[ServiceKind, float]
    cooldown_remaining_s: float = 0.0
    dispatches: int = 0
    secret_suffix: str = ""


def select_worker(
    snapshots: Sequence[WorkerSnapshot], service: ServiceKind, min_remaining: int = 0
) -> int | None:
    """Pick the worker for a new request, or None to defer.

    Among ACTIVE workers with budget above the reserve floor: idle workers
    (empty queue, nothing in flight) win outright; otherwise the shortest
    pending queue wins, ties broken by the largest remaining budget, then by
    the lowest worker id so the choice is deterministic. An empty pool is a
    configuration error, distinct from "nobody eligible right now".
    """
    if not snapshots:
        raise EmptyPoolError("no workers configured")
    eligible = [
        s
        for s in snapshots
        if s.owned and s.status is WorkerStatus.ACTIVE and s.remaining[service] > min_remaining
    ]
    if not eligible:
        return None
    idle = [s for s in eligible if s.queue_len == 0 and not s.in_flight]
    candidates = idle or eligible
    best = min(candidates, key=lambda s: (s.queue_len, -s.remaining[service], s.worker_id))
    return best.worker_id


@dataclass
class PoolCounters:
    accepted: int = 0
    resolved: int = 0
    upstream: int = 0
    timeout: int = 0
    unreachable: int = 0
    queue_full: int = 0
    pool_exhausted: int = 0
    abuse_hits: int = 0
    rate_limit_hits: int = 0
    retries: int = 0

    def as_dict(self) -> dict[str, int]:
        return dict(vars(self))


Forwarder = Callable[[TokenWorker, PendingRequest], Awaitable[ForwardResult]]


class TokenPool:
    """Owns the workers, the deferred pool, and one dispatch loop per worker.

    The pool is clock-injectable: `clock` is monotonic (pacing, deadlines,
    cooldowns), `wall` is epoch (budget reset times from upstream headers).
    The HTTP layer supplies `forwarder`, an async callable performing one
    upstream exchange for a dispatched request.
    """

    def __init__(
        self,
        tokens: Sequence[str],
        *,
        interval_s: float,
        timeout_s: float,
        min_remaining: int = 0,
        queue_cap: int | None = None,
        assumed_limit: int = DEFAULT_ASSUMED_LIMIT,
        abuse_cooldown_s: float = DEFAULT_ABUSE_COOLDOWN_S,
        sweep_interval_s: float = DEFAULT_SWEEP_INTERVAL_S,
        clock: Callable[[], float] = time.monotonic,
        wall: Callable[[], float] = time.time,
        forwarder: Forwarder | None = None,
        on_record: Callable[[ActivityRecord], None] | None = None,
    ) -> None:
        if not tokens:
            raise EmptyPoolError("a pool needs at least one access token")
        self.workers = [TokenWorker(i, tok, assumed_limit) for i, tok in enumerate(tokens)]
        self._by_secret = {w.secret: w for w in self.workers}
        self._interval_s = interval_s
        self._timeout_s = timeout_s
        self._min_remaining = min_remaining
        self._queue_cap = queue_cap
        self._abuse_cooldown_s = abuse_cooldown_s
        self._sweep_interval_s = sweep_interval_s
        self._clock = clock
        self._wall = wall
        self.forwarder = forwarder
        self.on_record = on_record
        self.counters = PoolCounters()
        self._deferred: dict[ServiceKind, deque[PendingRequest]] = {
            kind: deque() for kind in ServiceKind
        }
        self._in_flight_reqs: dict[int, PendingRequest] = {}
        self._tasks: list[asyncio.Task] = []
        self._started = False
        for w in self.workers:
            w.on_expire = self._expire_request

    # -- lifecycle -----------------------------------------------------------

    async def start(self) -> None:
        if self._started:
            return
        self._started = True
        for w in self.workers:
            w.wake = asyncio.Event()
            self._tasks.append(asyncio.create_task(self._run_worker(w), name=f"pool-{w.label}"))
        self._tasks.append(asyncio.create_task(self._sweep_loop(), name="pool-sweeper"))

    async def aclose(self) -> None:
        for task in self._tasks:
            task.cancel()
        for task in self._tasks:
            try:
                await task
            except (asyncio.CancelledError, Exception):  # noqa: BLE001 - teardown
                pass
        self._tasks.clear()
        self._started = False
        self._flush_all("pool shut down")

    # -- views ----------------------------------------------------------------

    def snapshot(self) -> list[WorkerSnapshot]:
        now = self._clock()
        views = []
        for w in self.workers:
            status = w.effective_status(now)
            views.append(
                WorkerSnapshot(
                    worker_id=w.id,
                    label=w.label,
                    status=status,
                    owned=w.owned,
                    queue_len=len(w.queue),
                    in_flight=w.in_flight,
                    remaining={k: b.remaining for k, b in w.budgets.items()},
                    limit={k: b.limit for k, b in w.budgets.items()},
                    reset_at={k: b.reset_at for k, b in w.budgets.items()},
                    cooldown_remaining_s=max(0.0, w.cooldown_until - now)
                    if status is WorkerStatus.ABUSE_COOLDOWN
                    else 0.0,
                    dispatches=len(w.dispatch_times),
                    secret_suffix=w.secret_suffix,
                )
            )
        return views

    def aggregate(self, service: ServiceKind) -> tuple[int, int, float | None]:
        """Pool-wide (limit, remaining, earliest reset) across usable workers."""
        now = self._clock()
        limit = remaining = 0
        reset: float | None = None
        for w in self.workers:
            if not w.owned or w.effective_status(now) is not WorkerStatus.ACTIVE:
                continue
            budget = w.budgets[service]
            limit += budget.limit
            remaining += budget.remaining
            if budget.reset_at > 0.0 and (reset is None or budget.reset_at < reset):
                reset = budget.reset_at
        return limit, remaining, reset

    def match_token(self, secret: str) -> TokenWorker | None:
        return self._by_secret.get(secret)

    @property
    def all_invalid(self) -> bool:
        return all(w.status is WorkerStatus.INVALID for w in self.workers)

    def deferred_depth(self) -> dict[ServiceKind, int]:
        return {kind: len(dq) for kind, dq in self._deferred.items()}

    def earliest_reset(self) -> float | None:
        """Soonest known budget reset across the pool (a retry-after hint)."""
        resets = [
            b.reset_at for w in self.workers for b in w.budgets.values() if b.reset_at > 0.0
        ]
        return min(resets) if resets else None

    # -- submission ------------------------------------------------------------

    async def submit(
        self,
        envelope: RequestEnvelope,
        service: ServiceKind,
        *,
        pinned: TokenWorker | None = None,
    ) -> ProxyOutcome:
        """Accept one client request and wait for its terminal outcome.

        `pinned` routes a request that arrived carrying one of the pool's own
        tokens straight to that token's worker so budget accounting stays
        attributed correctly.
        """
        now = self._clock()
        req = PendingRequest(
            envelope,
            service,
            enqueued_at=now,
            deadline=now + self._timeout_s,
            client_pinned=pinned is not None,
        )
        loop = asyncio.get_running_loop()
        future: asyncio.Future[ProxyOutcome] = loop.create_future()

        def _deliver(r: PendingRequest) -> None:
            if not future.done():
                future.set_result(r.outcome)  # type: ignore[arg-type]

        req._on_resolve = _deliver
        self.counters.accepted += 1
        self._route(req, pinned)
        # Watchdog: liveness guard only. A trip means a scheduler bug; the
        # conservation counters will expose it in the test suite.
        try:
            return await asyncio.wait_for(future, self._timeout_s * 2 + 10.0)
        except asyncio.TimeoutError:
            logger.error("watchdog fired for %s %s", envelope.method, envelope.path)
            if not req.resolved:
                self._resolve(req, ProxyOutcome(kind=OutcomeKind.TIMEOUT, detail="watchdog"))
            return req.outcome  # type: ignore[return-value]

    def _route(self, req: PendingRequest, pinned: TokenWorker | None = None) -> None:
        if self._deferred_total():
            self._drain_deferred()  # waiting requests get first pick
        if pinned is not None:
            self._enqueue_or_reject(pinned, req)
            return
        if self.all_invalid:
            self._resolve_exhausted(req)
            return
        chosen = select_worker(self.snapshot(), req.service, self._min_remaining)
        if chosen is None:
            dq = self._deferred[req.service]
            if self._queue_cap is not None and len(dq) >= self._queue_cap:
                self._resolve(req, ProxyOutcome(kind=OutcomeKind.QUEUE_FULL))
                return
            dq.append(req)
            return
        self._enqueue_or_reject(self.workers[chosen], req)

    def _enqueue_or_reject(self, worker: TokenWorker, req: PendingRequest) -> None:
        if self._queue_cap is not None and len(worker.queue) >= self._queue_cap:
            self._resolve(req, ProxyOutcome(kind=OutcomeKind.QUEUE_FULL))
            return
        try:
            worker.enqueue(req)
        except WorkerInvalidError:
            self._rebalance([req])
            return
        self._wake(worker)

    # -- dispatch loop -----------------------------------------------------------

    async def _run_worker(self, w: TokenWorker) -> None:
        assert w.wake is not None
        while True:
            w.wake.clear()
            req = w.dispatch_next(
                self._clock(),
                interval_s=self._interval_s,
                min_remaining=self._min_remaining,
                wall_now=self._wall(),
            )
            if req is None:
                try:
                    if w.block_hint_s is None:
                        await w.wake.wait()
                    else:
                        await asyncio.wait_for(w.wake.wait(), w.block_hint_s + 0.001)
                except asyncio.TimeoutError:
                    pass
                continue
            self._in_flight_reqs[w.id] = req
            result = await self._guarded_forward(w, req)
            self._in_flight_reqs.pop(w.id, None)
            self._apply_outcome(w, req, result)
            self._drain_deferred()

    async def _guarded_forward(self, w: TokenWorker, req: PendingRequest) -> ForwardResult:
        if self.forwarder is None:
            return ForwardResult(kind="unreachable", detail="no forwarder configured")
        try:
            # The forwarder enforces the request timeout itself; the outer
            # bound only catches a hung transport.
            return await asyncio.wait_for(self.forwarder(w, req), self._timeout_s + 5.0)
        except asyncio.TimeoutError:
            return ForwardResult(kind="timeout", detail="transport hang")
        except asyncio.CancelledError:
            raise
        except Exception as exc:  # noqa: BLE001 - a forwarder bug must not kill the loop
            logger.exception("forwarder raised for %s", w.label)
            return ForwardResult(kind="unreachable", detail=f"forwarder error: {exc}")

    def _apply_outcome(self, w: TokenWorker, req: PendingRequest, fr: ForwardResult) -> None:
        now = self._clock()
        wall_now = self._wall()
        latency_ms = (now - w.last_dispatch_at) * 1000.0
        service = req.service

        if fr.kind == "timeout":
            # The request may have reached the upstream; spend the budget
            # pessimistically rather than risk an overdraft.
            w.update_budget(service, None, None, None, observed_at=wall_now)
            w.complete_exchange()
            self._resolve(
                req,
                ProxyOutcome(
                    kind=OutcomeKind.TIMEOUT,
                    worker=w.label,
                    latency_ms=self._timeout_s * 1000.0,
                    queue_len=len(w.queue),
                    detail=fr.detail or "upstream call aborted at timeout",
                ),
            )
            return
        if fr.kind == "unreachable":
            w.complete_exchange()
            self._resolve(
                req,
                ProxyOutcome(
                    kind=OutcomeKind.UNREACHABLE,
                    worker=w.label,
                    latency_ms=latency_ms,
                    queue_len=len(w.queue),
                    detail=fr.detail,
                ),
            )
            return

        signal, retry_after = interpret_response(fr.status, fr.headers, fr.body)
        limit_hdr = _header(fr.headers, "x-ratelimit-limit")
        remaining_hdr = _header(fr.headers, "x-ratelimit-remaining")
        reset_hdr = _header(fr.headers, "x-ratelimit-reset")

        if signal is Signal.INVALID_TOKEN:
            w.complete_exchange()
            drained = w.mark_invalid()
            logger.warning("%s: token rejected upstream (401); worker retired", w.label)
            if req.client_pinned:
                # The client supplied this token itself: relay the truth.
                self._resolve_upstream(w, req, fr, latency_ms)
            else:
                drained = [req, *drained]
            self._rebalance(drained)
            if self.all_invalid:
                self._flush_all("every pool token is invalid")
            return

        if signal is Signal.ABUSE:
            w.update_budget(
                service, limit_hdr, remaining_hdr, reset_hdr,
                observed_at=wall_now, fallback_decrement=False,
            )
            w.complete_exchange()
            cooldown = retry_after if retry_after is not None else self._abuse_cooldown_s
            w.mark_abuse(now, cooldown)
            self.counters.abuse_hits += 1
            logger.warning("%s: abuse detection tripped; cooling down %.1fs", w.label, cooldown)
            self._retry_at_head(w, req, now)
            return

        if signal is Signal.RATE_LIMITED:
            if not w.update_budget(
                service, limit_hdr, remaining_hdr, reset_hdr,
                observed_at=wall_now, fallback_decrement=False,
            ):
                w.force_exhausted(service, wall_now)
            w.complete_exchange()
            self.counters.rate_limit_hits += 1
            self._retry_at_head(w, req, now)
            return

        w.update_budget(service, limit_hdr, remaining_hdr, reset_hdr, observed_at=wall_now)
        w.complete_exchange()
        self._resolve_upstream(w, req, fr, latency_ms)

    def _retry_at_head(self, w: TokenWorker, req: PendingRequest, now: float) -> None:
        if now > req.deadline:
            self._resolve(
                req,
                ProxyOutcome(
                    kind=OutcomeKind.TIMEOUT,
                    worker=w.label,
                    latency_ms=self._timeout_s * 1000.0,
                    detail="deadline passed while retrying",
                ),
            )
            return
        req.attempts += 1
        self.counters.retries += 1
        w.queue.appendleft(req)

    def _resolve_upstream(
        self, w: TokenWorker, req: PendingRequest, fr: ForwardResult, latency_ms: float
    ) -> None:
        self._resolve(
            req,
            ProxyOutcome(
                kind=OutcomeKind.UPSTREAM,
                status=fr.status,
                headers=fr.headers,
                body=fr.body,
                worker=w.label,
                latency_ms=latency_ms,
                queue_len=len(w.queue),
            ),
        )

    # -- re-balancing and sweeping ------------------------------------------------

    def _rebalance(self, reqs: Iterable[PendingRequest]) -> None:
        """Route orphaned requests (invalid/unowned worker) again, FIFO order."""
        for req in reqs:
            if req.resolved:
                continue
            if self._clock() > req.deadline:
                self._expire_request(req)
                continue
            req.attempts += 1
            try:
                chosen = select_worker(self.snapshot(), req.service, self._min_remaining)
            except EmptyPoolError:
                chosen = None
            if chosen is None:
                if self.all_invalid:
                    self._resolve_exhausted(req)
                else:
                    self._deferred[req.service].append(req)
            else:
                self._enqueue_or_reject(self.workers[chosen], req)

    def _drain_deferred(self) -> None:
        for service, dq in self._deferred.items():
            while dq:
                head = dq[0]
                if head.resolved:
                    dq.popleft()
                    continue
                if self._clock() > head.deadline:
                    dq.popleft()
                    self._expire_request(head)
                    continue
                try:
                    chosen = select_worker(self.snapshot(), service, self._min_remaining)
                except EmptyPoolError:
                    chosen = None
                if chosen is None:
                    break
                dq.popleft()
                self._enqueue_or_reject(self.workers[chosen], head)

    def _deferred_total(self) -> int:
        return sum(len(dq) for dq in self._deferred.values())

    async def _sweep_loop(self) -> None:
        while True:
            await asyncio.sleep(self._sweep_interval_s)
            self.sweep_once()

    def sweep_once(self) -> None:
        """Periodic upkeep: cooldown expiry, budget resets, deadline expiry, drains."""
        now = self._clock()
        wall_now = self._wall()
        for w in self.workers:
            if w.status is WorkerStatus.ABUSE_COOLDOWN and now >= w.cooldown_until:
                w.status = WorkerStatus.ACTIVE
                self._wake(w)
            if w.handle_reset(wall_now):
                self._wake(w)
            if w.queue and any(now > r.deadline for r in w.queue):
                # Expire in place (also mid-queue: re-balanced requests carry
                # older deadlines) so clients are answered at their timeout
                # even while the worker itself is blocked.
                expired = [r for r in w.queue if now > r.deadline]
                w.queue = deque(r for r in w.queue if now <= r.deadline)
                for req in expired:
                    if not req.resolved:
                        self._expire_request(req)
        for dq in self._deferred.values():
            for req in list(dq):
                if not req.resolved and now > req.deadline:
                    dq.remove(req)
                    self._expire_request(req)
        if self.all_invalid:
            self._flush_all("every pool token is invalid")
        self._drain_deferred()

    def _expire_request(self, req: PendingRequest) -> None:
        self._resolve(
            req,
            ProxyOutcome(
                kind=OutcomeKind.TIMEOUT,
                latency_ms=self._timeout_s * 1000.0,
                detail="deadline expired before dispatch",
            ),
        )

    def _resolve_exhausted(self, req: PendingRequest) -> None:
        reset = self.earliest_reset()
        retry_after = None
        if reset is not None:
            retry_after = max(0.0, reset - self._wall())
        self._resolve(
            req,
            ProxyOutcome(
                kind=OutcomeKind.POOL_EXHAUSTED,
                retry_after_s=retry_after,
                detail="no usable worker in the pool",
            ),
        )

    def _flush_all(self, reason: str) -> None:
        """Terminally resolve everything still waiting (shutdown / dead pool)."""
        for w in self.workers:
            for req in list(w.queue):
                if not req.resolved:
                    self._resolve_exhausted(req)
            w.queue.clear()
        for dq in self._deferred.values():
            for req in list(dq):
                if not req.resolved:
                    self._resolve_exhausted(req)
            dq.clear()
        for req in list(self._in_flight_reqs.values()):
            if not req.resolved:
                self._resolve(
                    req, ProxyOutcome(kind=OutcomeKind.POOL_EXHAUSTED, detail=reason)
                )
        self._in_flight_reqs.clear()

    # -- cluster hook ------------------------------------------------------------

    def apply_ownership(
        self,
        owned: set[str],
        budget_seeds: Mapping[str, Mapping[str, Mapping[str, float]]] | None = None,
        fingerprint: Callable[[str], str] | None = None,
    ) -> None:
        """Adopt a cluster ownership view: park un-owned workers, seed budgets.

        `owned` holds token fingerprints as computed by `fingerprint`.
        Budget seeds are applied only when newer than the local view.
        """
        if fingerprint is None:
            return
        for w in self.workers:
            fp = fingerprint(w.secret)
            want = fp in owned
            if want and not w.owned:
                w.owned = True
                seed = (budget_seeds or {}).get(fp)
                if seed:
                    for kind in ServiceKind:
                        view = seed.get(kind.value)
                        if not view:
                            continue
                        budget = w.budgets[kind]
                        if float(view.get("observed_at", 0.0)) > budget.observed_at:
                            budget.limit = int(view["limit"])
                            budget.remaining = int(view["remaining"])
                            budget.reset_at = float(view["reset_at"])
                            budget.observed_at = float(view["observed_at"])
                self._wake(w)
            elif not want and w.owned:
                w.owned = False
                stranded = list(w.queue)
                w.queue.clear()
                self._rebalance(stranded)
        self._drain_deferred()

    def budget_export(self, fingerprint: Callable[[str], str]) -> dict[str, dict[str, dict[str, float]]]:
        out: dict[str, dict[str, dict[str, float]]] = {}
        for w in self.workers:
            out[fingerprint(w.secret)] = {
                kind.value: {
                    "limit": float(b.limit),
                    "remaining": float(b.remaining),
                    "reset_at": b.reset_at,
                    "observed_at": b.observed_at,
                }
                for kind, b in w.budgets.items()
            }
        return out

    # -- internals ---------------------------------------------------------------

    def _wake(self, w: TokenWorker) -> None:
        if w.wake is not None:
            w.wake.set()

    def _resolve(self, req: PendingRequest, outcome: ProxyOutcome) -> None:
        req.resolve(outcome)
        c = self.counters
        c.resolved += 1
        if outcome.kind is OutcomeKind.UPSTREAM:
            c.upstream += 1
        elif outcome.kind is OutcomeKind.TIMEOUT:
            c.timeout += 1
        elif outcome.kind is OutcomeKind.UNREACHABLE:
            c.unreachable += 1
        elif outcome.kind is OutcomeKind.QUEUE_FULL:
            c.queue_full += 1
        elif outcome.kind is OutcomeKind.POOL_EXHAUSTED:
            c.pool_exhausted += 1
        if self.on_record is not None:
            path = req.envelope.path.split("?", 1)[0]
            record = ActivityRecord(
                ts=self._wall(),
                worker=outcome.worker or "-",
                service=req.service.value,
                method=req.envelope.method,
                path=path,
                status=outcome.status,
                status_class=status_class_for(outcome.kind.value, outcome.status),
                latency_ms=outcome.latency_ms,
                queue_len=outcome.queue_len,
            )
            try:
                self.on_record(record)
            except Exception:  # noqa: BLE001 - logging must never fail a request
                logger.exception("activity record sink failed")
