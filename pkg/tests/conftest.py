"""Shared fixtures: real mock-upstream and proxy servers on ephemeral ports."""

from __future__ import annotations

import os

import pytest

ACCEPTANCE_RESULTS: list[str] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and item.get_closest_marker("acceptance"):
        status = "PASS" if report.passed else "FAIL"
        ACCEPTANCE_RESULTS.append(f"{status}  {item.name}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(line)

from poolproxy.config import ProxyConfig
from poolproxy.mock_upstream import MockSettings, create_mock_app
from poolproxy.proxy import create_proxy_app
from poolproxy.runtime import BackgroundServer

TOKENS = ["ghp-test-token-a001", "ghp-test-token-b002", "ghp-test-token-c003"]

# Latency profile with every class scaled to near-zero for throughput tests.
FAST = {"latency_scale": 0.0}


@pytest.fixture
def run_server():
    """Start any ASGI app on a background uvicorn; stops them all afterwards."""
    servers: list[BackgroundServer] = []

    def _start(app) -> BackgroundServer:
        server = BackgroundServer(app).start()
        servers.append(server)
        return server

    yield _start
    for server in servers:
        server.stop()


@pytest.fixture
def run_mock(run_server):
    def _start(**overrides) -> BackgroundServer:
        settings = MockSettings(tokens=list(TOKENS), **overrides)
        return run_server(create_mock_app(settings))

    return _start


@pytest.fixture
def run_proxy(run_server):
    def _start(mock: BackgroundServer, **overrides) -> BackgroundServer:
        defaults = dict(
            tokens=tuple(TOKENS),
            request_interval_ms=0,
            request_timeout_ms=10_000,
            monitor=False,
            log_file=os.devnull,
            upstream_rest_url=mock.url,
            upstream_graphql_url=mock.url + "/graphql",
        )
        defaults.update(overrides)
        return run_server(create_proxy_app(ProxyConfig(**defaults)))

    return _start


def pool_of(proxy: BackgroundServer):
    return proxy.app.state.pool


def engine_of(mock: BackgroundServer):
    return mock.app.state.engine
