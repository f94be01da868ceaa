"""Proxy configuration: CLI flags, environment variables, optional config file.

Precedence is flags > environment > file > built-in defaults. The config file
is flat ``key = value`` text whose keys are the long flag names without the
leading dashes (``request-interval = 250``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, fields
from pathlib import Path

from . import __version__
from .scheduler import ServiceKind

logger = logging.getLogger(__name__)

DEFAULT_PORT = 3000
DEFAULT_REQUEST_INTERVAL_MS = 250
DEFAULT_REQUEST_TIMEOUT_MS = 20_000
DEFAULT_USER_AGENT = f"poolproxy/{__version__}"

# Spec'd environment variables (GPS_TOKENS is comma-separated).
ENV_VARS = {
    "GPS_TOKENS": "tokens",
    "GPS_API": "api",
    "GPS_REQUEST_INTERVAL_MS": "request_interval_ms",
    "GPS_REQUEST_TIMEOUT_MS": "request_timeout_ms",
    "GPS_MIN_REMAINING": "min_remaining",
    "GPS_PORT": "port",
    "GPS_CLUSTERING": "clustering",
    "UPSTREAM_REST_URL": "upstream_rest_url",
    "UPSTREAM_GRAPHQL_URL": "upstream_graphql_url",
}


@dataclass(frozen=True)
class ProxyConfig:
    """All proxy tunables, validated and immutable after startup."""

    tokens: tuple[str, ...]
    api: ServiceKind = ServiceKind.GRAPHQL
    request_interval_ms: int = DEFAULT_REQUEST_INTERVAL_MS
    request_timeout_ms: int = DEFAULT_REQUEST_TIMEOUT_MS
    min_remaining: int = 0
    clustering: bool = False
    port: int = DEFAULT_PORT
    queue_cap: int | None = None
    monitor: bool = True
    log_file: str | None = None
    host: str = "127.0.0.1"
    upstream_rest_url: str = "https://api.github.com"
    upstream_graphql_url: str = "https://api.github.com/graphql"
    user_agent: str = DEFAULT_USER_AGENT
    assumed_limit: int = 5000
    peers: tuple[str, ...] = ()
    instance_id: str | None = None
    cluster_listen: str | None = None
    lease_ttl_s: float = 15.0

    @property
    def interval_s(self) -> float:
        return self.request_interval_ms / 1000.0

    @property
    def timeout_s(self) -> float:
        return self.request_timeout_ms / 1000.0


def _file_key(field_name: str) -> str:
    return field_name.replace("_", "-").removesuffix("-ms").removesuffix("-s")


# field name -> config-file/flag key (long flag name without leading dashes)
_FIELD_KEYS = {f.name: _file_key(f.name) for f in fields(ProxyConfig)}
_KEY_FIELDS = {v: k for k, v in _FIELD_KEYS.items()}


def config_to_file_text(config: ProxyConfig) -> str:
    """Serialize a config to the flat file format (round-trips via parse_config)."""
    lines = ["# poolproxy configuration"]
    for f in fields(ProxyConfig):
        value = getattr(config, f.name)
        if value is None:
            continue
        key = _FIELD_KEYS[f.name]
        if isinstance(value, tuple):
            value = ",".join(value)
        elif isinstance(value, ServiceKind):
            value = value.value
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_file_text(text: str, error: "argparse.ArgumentParser.error") -> dict[str, str]:
    values: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            error(f"config file line {ln}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _KEY_FIELDS:
            error(f"config file line {ln}: unknown key {key!r}")
        values[_KEY_FIELDS[key]] = value.strip()
    return values


class _HelpfulParser(argparse.ArgumentParser):
    """Prints the full help screen (not just usage) on any usage error."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_help(sys.stderr)
        self.exit(2, f"\nerror: {message}\n")


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return value


def build_serve_parser(prog: str = "poolproxy serve") -> argparse.ArgumentParser:
    parser = _HelpfulParser(
        prog=prog,
        description=(
            "Run the scheduling proxy. Clients may issue unrestricted parallel "
            "requests; the proxy queues, paces and balances them across the "
            "token pool so upstream rate limits are never violated."
        ),
        epilog=(
            "environment variables: GPS_TOKENS (comma-separated), GPS_API, "
            "GPS_REQUEST_INTERVAL_MS, GPS_REQUEST_TIMEOUT_MS, GPS_MIN_REMAINING, "
            "GPS_PORT, GPS_CLUSTERING, UPSTREAM_REST_URL, UPSTREAM_GRAPHQL_URL. "
            "Precedence: flags > environment > config file > defaults."
        ),
    )
    parser.add_argument("--version", action="version", version=f"poolproxy {__version__}")
    parser.add_argument(
        "--tokens",
        action="append",
        metavar="TOKEN[,TOKEN...]",
        help="access token(s); repeatable or comma-separated (env GPS_TOKENS)",
    )
    parser.add_argument(
        "--api",
        choices=["rest", "graphql"],
        help="primary upstream API (default: graphql; env GPS_API)",
    )
    parser.add_argument(
        "--request-interval",
        type=_non_negative_int,
        metavar="MS",
        help=f"wait between a worker's dispatches, milliseconds "
        f"(default: {DEFAULT_REQUEST_INTERVAL_MS}; env GPS_REQUEST_INTERVAL_MS)",
    )
    parser.add_argument(
        "--request-timeout",
        type=_positive_int,
        metavar="MS",
        help=f"max execution time of one request, milliseconds "
        f"(default: {DEFAULT_REQUEST_TIMEOUT_MS}; env GPS_REQUEST_TIMEOUT_MS)",
    )
    parser.add_argument(
        "--min-remaining",
        type=_non_negative_int,
        metavar="N",
        help="reserve floor of requests left unspent on each token "
        "(default: 0; env GPS_MIN_REMAINING)",
    )
    parser.add_argument(
        "--clustering",
        action=argparse.BooleanOptionalAction,
        help="share the token pool across several proxy instances (env GPS_CLUSTERING)",
    )
    parser.add_argument(
        "--port",
        type=int,
        help=f"listen port (default: {DEFAULT_PORT}; env GPS_PORT)",
    )
    parser.add_argument("--host", help="listen address (default: 127.0.0.1)")
    parser.add_argument(
        "--queue-cap",
        type=_positive_int,
        metavar="N",
        help="optional per-queue cap; beyond it clients get an immediate 503 "
        "(default: unbounded)",
    )
    parser.add_argument(
        "--monitor",
        action=argparse.BooleanOptionalAction,
        help="live terminal activity monitor (default: on; --no-monitor for CI)",
    )
    parser.add_argument("--log-file", metavar="PATH", help="request log sink (default: stderr)")
    parser.add_argument("--upstream-rest-url", metavar="URL", help="REST base (env UPSTREAM_REST_URL)")
    parser.add_argument(
        "--upstream-graphql-url", metavar="URL", help="GraphQL endpoint (env UPSTREAM_GRAPHQL_URL)"
    )
    parser.add_argument("--user-agent", help="user-agent filled in when clients omit one")
    parser.add_argument(
        "--assumed-limit",
        type=_positive_int,
        metavar="N",
        help="per-token hourly budget assumed before the first upstream headers "
        "(default: 5000)",
    )
    parser.add_argument("--peers", metavar="HOST:PORT,...", help="cluster peer listeners")
    parser.add_argument("--instance-id", help="cluster instance identity (default: host:cluster-port)")
    parser.add_argument("--cluster-listen", metavar="HOST:PORT", help="cluster gossip listener")
    parser.add_argument(
        "--lease-ttl", type=float, metavar="SECONDS", help="cluster token lease TTL (default: 15)"
    )
    parser.add_argument("--config", metavar="PATH", help="flat key = value config file")
    return parser


def _merge(flag, env_val, file_val, default):
    if flag is not None:
        return flag
    if env_val is not None:
        return env_val
    if file_val is not None:
        return file_val
    return default


def _parse_bool(text: str, name: str, error) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    error(f"{name}: expected a boolean, got {text!r}")
    raise AssertionError("unreachable")


def _parse_int(text: str, name: str, error) -> int:
    try:
        return int(text)
    except ValueError:
        error(f"{name}: expected an integer, got {text!r}")
        raise


def _split_tokens(raw: Sequence[str] | str | None) -> tuple[str, ...] | None:
    if raw is None:
        return None
    parts: list[str] = []
    chunks = [raw] if isinstance(raw, str) else list(raw)
    for chunk in chunks:
        parts.extend(p.strip() for p in chunk.split(",") if p.strip())
    return tuple(parts)


def parse_config(
    argv: Sequence[str],
    env: Mapping[str, str],
    *,
    file_text: str | None = None,
    prog: str = "poolproxy serve",
) -> ProxyConfig:
    """Build a validated ProxyConfig from flags, env and an optional file.

    Pure given (argv, env, file contents): same inputs, same config. Usage
    errors print the help screen and exit with status 2.
    """
    parser = build_serve_parser(prog)
    ns = parser.parse_args(list(argv))

    if file_text is None and ns.config:
        path = Path(ns.config)
        if not path.exists():
            parser.error(f"--config: file not found: {ns.config}")
        file_text = path.read_text()
    file_vals = parse_file_text(file_text, parser.error) if file_text else {}

    def from_env(var: str):
        return env.get(var)

    def pick(field: str, flag_value, env_var: str | None):
        return _merge(
            flag_value,
            from_env(env_var) if env_var else None,
            file_vals.get(field),
            None,
        )

    tokens = _split_tokens(ns.tokens)
    if tokens is None:
        env_tokens = from_env("GPS_TOKENS")
        tokens = _split_tokens(env_tokens) if env_tokens else None
    if tokens is None and "tokens" in file_vals:
        tokens = _split_tokens(file_vals["tokens"])
    if not tokens:
        parser.error(
            "at least one access token is required (--tokens, GPS_TOKENS, or a config file)"
        )
    deduped: list[str] = []
    for tok in tokens:
        if tok in deduped:
            logger.warning("duplicate token …%s ignored; pool keeps one worker per token", tok[-4:])
            continue
        deduped.append(tok)
    tokens = tuple(deduped)

    api_raw = pick("api", ns.api, "GPS_API")
    if api_raw is None:
        api = ServiceKind.GRAPHQL
    else:
        lowered = str(api_raw).strip().lower()
        if lowered not in ("rest", "graphql"):
            parser.error(f"--api/GPS_API: expected rest or graphql, got {api_raw!r}")
        api = ServiceKind(lowered)

    def picked_int(field: str, flag_value, env_var: str | None, default: int, name: str) -> int:
        value = pick(field, flag_value, env_var)
        if value is None:
            return default
        if isinstance(value, int):
            return value
        return _parse_int(value, name, parser.error)

    interval_ms = picked_int(
        "request_interval_ms", ns.request_interval, "GPS_REQUEST_INTERVAL_MS",
        DEFAULT_REQUEST_INTERVAL_MS, "--request-interval/GPS_REQUEST_INTERVAL_MS",
    )
    timeout_ms = picked_int(
        "request_timeout_ms", ns.request_timeout, "GPS_REQUEST_TIMEOUT_MS",
        DEFAULT_REQUEST_TIMEOUT_MS, "--request-timeout/GPS_REQUEST_TIMEOUT_MS",
    )
    min_remaining = picked_int(
        "min_remaining", ns.min_remaining, "GPS_MIN_REMAINING", 0, "--min-remaining/GPS_MIN_REMAINING"
    )
    port = picked_int("port", ns.port, "GPS_PORT", DEFAULT_PORT, "--port/GPS_PORT")
    assumed_limit = picked_int(
        "assumed_limit", ns.assumed_limit, None, ProxyConfig.assumed_limit, "--assumed-limit"
    )

    clustering_raw = pick("clustering", ns.clustering, "GPS_CLUSTERING")
    clustering = (
        clustering_raw
        if isinstance(clustering_raw, bool)
        else _parse_bool(clustering_raw, "--clustering/GPS_CLUSTERING", parser.error)
        if clustering_raw is not None
        else False
    )
    monitor_raw = pick("monitor", ns.monitor, None)
    monitor = (
        monitor_raw
        if isinstance(monitor_raw, bool)
        else _parse_bool(monitor_raw, "--monitor", parser.error)
        if monitor_raw is not None
        else True
    )

    queue_cap_raw = pick("queue_cap", ns.queue_cap, None)
    queue_cap = (
        queue_cap_raw
        if isinstance(queue_cap_raw, int) or queue_cap_raw is None
        else _parse_int(queue_cap_raw, "--queue-cap", parser.error)
    )

    lease_raw = pick("lease_ttl_s", ns.lease_ttl, None)
    try:
        lease_ttl_s = float(lease_raw) if lease_raw is not None else 15.0
    except ValueError:
        parser.error(f"--lease-ttl: expected seconds, got {lease_raw!r}")

    peers_raw = pick("peers", ns.peers, None)
    peers = _split_tokens(peers_raw) or ()

    config = ProxyConfig(
        tokens=tokens,
        api=api,
        request_interval_ms=interval_ms,
        request_timeout_ms=timeout_ms,
        min_remaining=min_remaining,
        clustering=clustering,
        port=port,
        queue_cap=queue_cap,
        monitor=monitor,
        log_file=pick("log_file", ns.log_file, None),
        host=pick("host", ns.host, None) or "127.0.0.1",
        upstream_rest_url=pick("upstream_rest_url", ns.upstream_rest_url, "UPSTREAM_REST_URL")
        or ProxyConfig.upstream_rest_url,
        upstream_graphql_url=pick(
            "upstream_graphql_url", ns.upstream_graphql_url, "UPSTREAM_GRAPHQL_URL"
        )
        or ProxyConfig.upstream_graphql_url,
        user_agent=pick("user_agent", ns.user_agent, None) or DEFAULT_USER_AGENT,
        assumed_limit=assumed_limit,
        peers=peers,
        instance_id=pick("instance_id", ns.instance_id, None),
        cluster_listen=pick("cluster_listen", ns.cluster_listen, None),
        lease_ttl_s=lease_ttl_s,
    )

    if config.request_interval_ms < 0:
        parser.error("--request-interval must be >= 0")
    if config.request_timeout_ms <= 0:
        parser.error("--request-timeout must be > 0")
    if not 0 <= config.port <= 65535:
        parser.error(f"--port/GPS_PORT: invalid tcp port {config.port}")
    if config.min_remaining < 0 or config.min_remaining >= config.assumed_limit:
        parser.error(
            f"--min-remaining must be in [0, {config.assumed_limit}) "
            "(below the per-token limit)"
        )
    return config
