"""Command-line entry points.

``serve`` runs the proxy service; ``mock`` runs the offline upstream;
``status``/``monitor`` are thin HTTP clients of a running proxy's control
endpoints; ``bench`` reproduces the direct-vs-proxied collection experiment.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

from . import __version__
from .config import _HelpfulParser, parse_config

TOP_HELP = f"""poolproxy {__version__} - token-pool scheduling proxy

usage: poolproxy <command> [options]

commands:
  serve     run the proxy (see `poolproxy serve --help` for all options)
  mock      run the offline mock upstream
  bench     compare direct vs proxied collection against the mock
  status    print one monitor frame from a running proxy
  monitor   live-refresh the activity monitor of a running proxy

`poolproxy <command> --help` shows each command's flags.
"""


def main(argv: list[str] | None = None) -> int:
    args = list(sys.argv[1:] if argv is None else argv)
    if not args or args[0] in ("-h", "--help"):
        print(TOP_HELP)
        return 0
    if args[0] == "--version":
        print(f"poolproxy {__version__}")
        return 0
    command, rest = args[0], args[1:]
    handlers = {
        "serve": cmd_serve,
        "mock": cmd_mock,
        "bench": cmd_bench,
        "status": cmd_status,
        "monitor": cmd_monitor,
    }
    handler = handlers.get(command)
    if handler is None:
        print(TOP_HELP, file=sys.stderr)
        print(f"error: unknown command {command!r}", file=sys.stderr)
        return 2
    try:
        return handler(rest)
    except SystemExit as exc:  # argparse help/usage paths
        return int(exc.code or 0)
    except KeyboardInterrupt:
        return 130


def cmd_serve(argv: list[str]) -> int:
    import uvicorn

    from .proxy import create_proxy_app

    config = parse_config(argv, os.environ)
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr, format="%(asctime)s %(name)s %(message)s"
    )
    monitor_stream = sys.stdout if config.monitor and sys.stdout.isatty() else None
    app = create_proxy_app(config, monitor_stream=monitor_stream)
    suffixes = ", ".join("…" + t[-4:] for t in config.tokens)
    print(
        f"poolproxy serving on {config.host}:{config.port} "
        f"({len(config.tokens)} workers: {suffixes})",
        file=sys.stderr,
    )
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning", access_log=False)
    return 0


def cmd_mock(argv: list[str]) -> int:
    import uvicorn

    from .mock_upstream import MockSettings, create_mock_app

    parser = _HelpfulParser(prog="poolproxy mock", description="Run the offline mock upstream.")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=3001)
    parser.add_argument("--config", metavar="PATH", help="JSON settings file (overrides flags)")
    parser.add_argument("--tokens", action="append", help="accepted token(s), comma-separated")
    parser.add_argument("--limit", type=int, default=50, help="per-token requests per window")
    parser.add_argument("--window", type=float, default=60.0, metavar="SECONDS")
    parser.add_argument("--latency-scale", type=float, default=1.0)
    parser.add_argument("--seed", type=int, default=42)
    ns = parser.parse_args(argv)

    if ns.config:
        with open(ns.config, encoding="utf-8") as fh:
            settings = MockSettings.model_validate_json(fh.read())
    else:
        tokens: list[str] = []
        for chunk in ns.tokens or []:
            tokens.extend(t.strip() for t in chunk.split(",") if t.strip())
        if not tokens:
            parser.error("at least one token is required (--tokens or --config)")
        settings = MockSettings(
            tokens=tokens,
            limit=ns.limit,
            window_s=ns.window,
            latency_scale=ns.latency_scale,
            seed=ns.seed,
        )
    uvicorn.run(
        create_mock_app(settings), host=ns.host, port=ns.port, log_level="warning", access_log=False
    )
    return 0


def cmd_bench(argv: list[str]) -> int:
    from .bench import run_benchmark

    parser = _HelpfulParser(
        prog="poolproxy bench",
        description="Benchmark direct-sequential collection against parallel "
        "collection through the proxy (mock upstream).",
    )
    parser.add_argument("--mode", choices=["direct", "proxied", "compare"], default="compare")
    parser.add_argument("--tokens", type=int, default=3, metavar="N", help="pool size")
    parser.add_argument("--repos", type=int, default=5, metavar="R")
    parser.add_argument("--pages", type=int, default=3, metavar="P")
    parser.add_argument("--processing-ms", type=float, default=30.0, metavar="MS")
    parser.add_argument("--interval-ms", type=float, default=50.0, help="direct-mode pause")
    parser.add_argument("--proxy-interval-ms", type=int, default=50)
    parser.add_argument("--latency-scale", type=float, default=1.0)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--out", metavar="CSV", help="timeline output file")
    parser.add_argument("--mock-url", help="use an already-running mock upstream")
    parser.add_argument("--proxy-url", help="use an already-running proxy")
    parser.add_argument("--timeout-s", type=float, default=60.0)
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    return run_benchmark(
        ns.mode,
        tokens_n=ns.tokens,
        repos=ns.repos,
        pages=ns.pages,
        processing_ms=ns.processing_ms,
        interval_ms=ns.interval_ms,
        proxy_interval_ms=ns.proxy_interval_ms,
        latency_scale=ns.latency_scale,
        seed=ns.seed,
        out=ns.out,
        mock_url=ns.mock_url,
        proxy_url=ns.proxy_url,
        timeout_s=ns.timeout_s,
    )


def _fetch_frame(url: str, window_s: float) -> str:
    import httpx

    from .models import ActivitySummary, PoolStatus
    from .observability import render_monitor
    from .proxy import monitor_summary

    with httpx.Client(base_url=url, timeout=5.0) as client:
        status = PoolStatus.model_validate(client.get("/__proxy__/status").json())
        summary = ActivitySummary.model_validate(
            client.get("/__proxy__/summary", params={"window_s": window_s}).json()
        )
    return render_monitor(monitor_summary(status, summary.counts, window_s, time.time()))


def cmd_status(argv: list[str]) -> int:
    parser = _HelpfulParser(prog="poolproxy status", description="One-shot pool status frame.")
    parser.add_argument("--url", default="http://127.0.0.1:3000")
    parser.add_argument("--window", type=float, default=60.0, metavar="SECONDS")
    ns = parser.parse_args(argv)
    print(_fetch_frame(ns.url, ns.window))
    return 0


def cmd_monitor(argv: list[str]) -> int:
    parser = _HelpfulParser(
        prog="poolproxy monitor", description="Live activity monitor (refreshes every second)."
    )
    parser.add_argument("--url", default="http://127.0.0.1:3000")
    parser.add_argument("--window", type=float, default=60.0, metavar="SECONDS")
    parser.add_argument("--refresh", type=float, default=1.0, metavar="SECONDS")
    ns = parser.parse_args(argv)
    while True:
        frame = _fetch_frame(ns.url, ns.window)
        if sys.stdout.isatty():
            sys.stdout.write("\x1b[2J\x1b[H")
        print(frame, flush=True)
        time.sleep(ns.refresh)


if __name__ == "__main__":
    raise SystemExit(main())
