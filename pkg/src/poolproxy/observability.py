"""Structured per-request logging and the live terminal activity monitor."""

from __future__ import annotations

import sys
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass
from typing import IO, Iterable

STATUS_CLASSES = ("2xx", "3xx", "4xx", "5xx", "timeout")
DEFAULT_RING_SIZE = 1000
MONITOR_WIDTH = 100


def status_class_for(kind: str, status: int) -> str:
    """Bucket a terminal outcome for logs and the monitor histogram."""
    if kind == "timeout":
        return "timeout"
    if kind in ("unreachable", "pool_exhausted", "queue_full"):
        return "5xx"
    if 200 <= status < 300:
        return "2xx"
    if 300 <= status < 400:
        return "3xx"
    if 400 <= status < 500:
        return "4xx"
    return "5xx"


def redact_secret(secret: str) -> str:
    """Display form of a token: at most its last four characters."""
    return "…" + secret[-4:] if secret else "-"


@dataclass(frozen=True)
class ActivityRecord:
    """One proxied request's outcome. Never contains a token secret."""

    ts: float                   # epoch seconds
    worker: str
    service: str
    method: str
    path: str                   # query string stripped
    status: int
    status_class: str
    latency_ms: float
    queue_len: int


def format_line(rec: ActivityRecord) -> str:
    stamp = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(rec.ts))
    ms = int((rec.ts % 1) * 1000)
    return (
        f"ts={stamp}.{ms:03d}Z worker={rec.worker} service={rec.service} "
        f"method={rec.method} path={rec.path} class={rec.status_class} "
        f"status={rec.status} latency_ms={rec.latency_ms:.1f} queue={rec.queue_len}"
    )


class ActivityLog:
    """Line-delimited request log plus a bounded in-memory ring for the monitor.

    `record()` may be called from any request handler; a sink write failure is
    reported on stderr and never fails the request.
    """

    def __init__(
        self,
        *,
        ring_size: int = DEFAULT_RING_SIZE,
        sink: IO[str] | None = None,
    ) -> None:
        self._ring: deque[ActivityRecord] = deque(maxlen=ring_size)
        self._sink = sink
        self._lock = threading.Lock()

    @property
    def ring_size(self) -> int:
        return self._ring.maxlen or 0

    def record(self, rec: ActivityRecord) -> None:
        with self._lock:
            self._ring.append(rec)
        sink = self._sink
        if sink is None:
            return
        try:
            sink.write(format_line(rec) + "\n")
            sink.flush()
        except Exception as exc:  # noqa: BLE001
            print(f"activity log sink failed: {exc}", file=sys.stderr)

    def records(self) -> list[ActivityRecord]:
        with self._lock:
            return list(self._ring)

    def summarize(self, window_s: float, *, now: float | None = None) -> dict[str, int]:
        """Per-status-class counts over records whose timestamp is in the window."""
        now = time.time() if now is None else now
        floor = now - window_s
        counts: Counter[str] = Counter()
        for rec in self.records():
            if rec.ts >= floor:
                counts[rec.status_class] += 1
        return {cls: counts.get(cls, 0) for cls in STATUS_CLASSES}


@dataclass(frozen=True)
class WorkerRow:
    """Monitor-facing view of one worker (no secrets beyond a 4-char suffix)."""

    label: str
    suffix: str
    status: str
    queue_len: int
    in_flight: bool
    remaining: dict[str, int]
    limit: dict[str, int]
    reset_in_s: dict[str, float]
    cooldown_remaining_s: float
    dispatches: int


@dataclass(frozen=True)
class MonitorSummary:
    window_s: float
    counts: dict[str, int]
    workers: tuple[WorkerRow, ...]
    deferred: dict[str, int]
    accepted: int
    resolved: int
    api: str


def render_monitor(summary: MonitorSummary, width: int = MONITOR_WIDTH) -> str:
    """Fixed-width text frame: per-worker rows plus the status-class histogram.

    Every line is padded/truncated to `width` so consecutive frames never
    jitter. Display only; nothing here mutates scheduler state.
    """

    def line(text: str = "") -> str:
        body = text[: width - 2].ljust(width - 2)
        return f"|{body}|"

    rule = "+" + "-" * (width - 2) + "+"
    total = sum(summary.counts.values())
    out = [rule]
    out.append(
        line(
            f" pool: {len(summary.workers)} workers  api={summary.api}"
            f"  window={summary.window_s:.0f}s  accepted={summary.accepted}"
            f"  resolved={summary.resolved}"
        )
    )
    out.append(line(f" {'WORKER':<12}{'STATUS':<16}{'QUEUE':<7}{'REST':<18}{'GRAPHQL':<18}NOTE"))
    for row in summary.workers:
        rest = f"{row.remaining.get('rest', 0)}/{row.limit.get('rest', 0)}"
        gql = f"{row.remaining.get('graphql', 0)}/{row.limit.get('graphql', 0)}"
        note = ""
        if row.cooldown_remaining_s > 0:
            note = f"cooldown {row.cooldown_remaining_s:.0f}s"
        elif row.in_flight:
            note = "in-flight"
        reset_rest = row.reset_in_s.get("rest", 0.0)
        if reset_rest > 0:
            rest += f" ({reset_rest:.0f}s)"
        out.append(
            line(
                f" {row.label + '(' + redact_secret(row.suffix) + ')':<12}"
                f"{row.status:<16}{row.queue_len:<7}{rest:<18}{gql:<18}{note}"
            )
        )
    deferred = "  ".join(f"deferred[{k}]={v}" for k, v in sorted(summary.deferred.items()))
    out.append(line(f" {deferred}"))
    hist = "  ".join(f"{cls}:{summary.counts.get(cls, 0)}" for cls in STATUS_CLASSES)
    out.append(line(f" {hist}  total:{total}"))
    out.append(rule)
    return "\n".join(out)


def build_summary(
    counts: dict[str, int],
    worker_rows: Iterable[WorkerRow],
    deferred: dict[str, int],
    *,
    window_s: float,
    accepted: int,
    resolved: int,
    api: str,
) -> MonitorSummary:
    return MonitorSummary(
        window_s=window_s,
        counts=counts,
        workers=tuple(worker_rows),
        deferred=deferred,
        accepted=accepted,
        resolved=resolved,
        api=api,
    )
