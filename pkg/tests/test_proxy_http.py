"""Proxy front door: classification, normalization, relaying, end-to-end flow."""

from __future__ import annotations

import asyncio
import hashlib
import json
import random
import time

import httpx

from conftest import TOKENS, engine_of, pool_of
from poolproxy.mock_upstream import synthetic_body
from poolproxy.proxy import classify_service, normalize_request
from poolproxy.scheduler import RequestEnvelope, ServiceKind


class TestClassify:
    def test_graphql_endpoint_path(self):
        assert classify_service("/graphql", "POST") is ServiceKind.GRAPHQL

    def test_rest_paths(self):
        assert classify_service("/repos/x/y/issues", "GET") is ServiceKind.REST

    def test_exact_path_match_only(self):
        assert classify_service("/graphql-docs", "GET") is ServiceKind.REST
        assert classify_service("/graphql/extra", "POST") is ServiceKind.REST

    def test_query_string_does_not_change_the_service(self):
        assert classify_service("/graphql?pretty=1", "POST") is ServiceKind.GRAPHQL


class TestNormalize:
    def test_fills_token_when_authorization_absent(self):
        env = RequestEnvelope("GET", "/x", (("accept", "application/json"),))
        out = normalize_request(env, "sec-ret-9999", "agent/1.0")
        assert out.header("authorization") == "token sec-ret-9999"

    def test_existing_user_agent_is_untouched(self):
        env = RequestEnvelope("GET", "/x", (("user-agent", "miner/1.0"),))
        out = normalize_request(env, "sec-ret-9999", "agent/1.0")
        assert out.header("user-agent") == "miner/1.0"

    def test_fills_both_and_leaves_body_bytes_alone(self):
        body = b'{"query": "{ viewer { login } }"}'
        env = RequestEnvelope("POST", "/graphql", (), body)
        out = normalize_request(env, "sec-ret-9999", "agent/1.0")
        assert out.header("authorization") == "token sec-ret-9999"
        assert out.header("user-agent") == "agent/1.0"
        assert hashlib.sha256(out.body).digest() == hashlib.sha256(body).digest()

    def test_normalization_is_idempotent(self):
        env = RequestEnvelope("GET", "/x", (("x-extra", "1"),), b"payload")
        once = normalize_request(env, "sec-ret-9999", "agent/1.0")
        twice = normalize_request(once, "sec-ret-9999", "agent/1.0")
        assert once == twice


class TestAggregateRelay:
    def test_two_workers_sum_their_remaining(self, run_mock, run_proxy):
        mock = run_mock(latency_scale=0.0, limit=50)
        proxy = run_proxy(mock, assumed_limit=50)
        r = httpx.get(proxy.url + "/repos/o/r/tags", timeout=10)
        # Worker that served: 49; two untouched workers still assume 50 each.
        assert r.headers["x-ratelimit-remaining"] == "149"
        assert r.headers["x-ratelimit-limit"] == "150"

    def test_single_worker_pool_relays_upstream_headers_unchanged(self, run_mock, run_proxy):
        mock = run_mock(latency_scale=0.0, limit=50)
        proxy = run_proxy(mock, tokens=(TOKENS[0],), assumed_limit=50)
        via_proxy = httpx.get(proxy.url + "/repos/o/r/tags?page=1", timeout=10)
        direct = httpx.get(
            mock.url + "/repos/o/r/tags?page=2",
            headers={"authorization": f"token {TOKENS[0]}"},
            timeout=10,
        )
        assert via_proxy.headers["x-ratelimit-limit"] == direct.headers["x-ratelimit-limit"]
        assert int(via_proxy.headers["x-ratelimit-reset"]) == int(direct.headers["x-ratelimit-reset"])
        assert int(via_proxy.headers["x-ratelimit-remaining"]) == 49

    def test_aggregate_matches_status_endpoint_recount(self, run_mock, run_proxy):
        rng = random.Random(5)
        mock = run_mock(latency_scale=0.0, limit=50)
        proxy = run_proxy(mock, assumed_limit=50)
        with httpx.Client(timeout=10) as client:
            for i in range(rng.randint(5, 12)):
                client.get(proxy.url + f"/repos/o/r/tags?page={i}")
            r = client.get(proxy.url + "/repos/o/r/tags?page=99")
            status = client.get(proxy.url + "/__proxy__/status").json()
        oracle = sum(w["budgets"]["rest"]["remaining"] for w in status["workers"])
        assert int(r.headers["x-ratelimit-remaining"]) == oracle

    def test_headers_not_injected_when_upstream_sent_none(self, run_mock, run_proxy):
        mock = run_mock(latency_scale=0.0)
        proxy = run_proxy(mock)
        r = httpx.get(proxy.url + "/__mock__/config", timeout=10)
        assert r.status_code == 200
        assert "x-ratelimit-remaining" not in r.headers
        assert r.headers["x-pool-worker"].startswith("w")


class TestEndToEnd:
    def test_one_request_relayed_with_exactly_one_upstream_call(self, run_mock, run_proxy):
        mock = run_mock(latency_scale=0.0)
        proxy = run_proxy(mock)
        r = httpx.get(proxy.url + "/repos/org/proj/issues?page=4", timeout=10)
        assert r.status_code == 200
        assert r.content == synthetic_body("/repos/org/proj/issues?page=4", 4)
        report = engine_of(mock).ledger_report()
        assert report.authenticated_calls == 1 and report.violations == 0

    def test_six_concurrent_clients_one_token_stay_serialized(self, run_mock, run_proxy):
        mock = run_mock(latency_ms={"issues": 40.0})
        proxy = run_proxy(mock, tokens=(TOKENS[0],))

        async def blast():
            async with httpx.AsyncClient(base_url=proxy.url, timeout=30) as client:
                return await asyncio.gather(
                    *(client.get(f"/repos/o/r/issues?page={i}") for i in range(6))
                )

        responses = asyncio.run(blast())
        assert all(r.status_code == 200 for r in responses)
        report = engine_of(mock).ledger_report()
        assert report.violations == 0
        assert report.authenticated_calls == 6

    def test_eighteen_concurrent_on_one_token_zero_violations(self, run_mock, run_proxy):
        # Three client processes x six in-flight requests each, one token.
        mock = run_mock(latency_ms={"stargazers": 15.0})
        proxy = run_proxy(mock, tokens=(TOKENS[0],))

        async def one_client(client, cid):
            return await asyncio.gather(
                *(client.get(f"/repos/o/r{cid}/stargazers?page={i}") for i in range(6))
            )

        async def blast():
            async with httpx.AsyncClient(base_url=proxy.url, timeout=60) as client:
                return await asyncio.gather(*(one_client(client, c) for c in range(3)))

        groups = asyncio.run(blast())
        assert all(r.status_code == 200 for grp in groups for r in grp)
        report = engine_of(mock).ledger_report()
        assert report.violations == 0 and report.authenticated_calls == 18

    def test_thirty_concurrent_across_three_tokens(self, run_mock, run_proxy):
        mock = run_mock(latency_ms={"tags": 10.0})
        proxy = run_proxy(mock)

        async def blast():
            async with httpx.AsyncClient(base_url=proxy.url, timeout=60) as client:
                return await asyncio.gather(
                    *(client.get(f"/repos/o/r/tags?page={i}") for i in range(30))
                )

        responses = asyncio.run(blast())
        assert all(r.status_code == 200 for r in responses)
        report = engine_of(mock).ledger_report()
        assert report.violations == 0
        assert report.total_calls == 30
        workers_used = {r.headers["x-pool-worker"] for r in responses}
        assert workers_used == {"w0", "w1", "w2"}

    def test_completions_equal_dispatches_over_mixed_latencies(self, run_mock, run_proxy):
        mock = run_mock(latency_ms={"issues": 30.0, "stargazers": 1.0})
        proxy = run_proxy(mock)

        async def blast():
            async with httpx.AsyncClient(base_url=proxy.url, timeout=60) as client:
                paths = [
                    f"/repos/o/r/{'issues' if i % 3 == 0 else 'stargazers'}?page={i}"
                    for i in range(100)
                ]
                return await asyncio.gather(*(client.get(p) for p in paths))

        responses = asyncio.run(blast())
        assert all(r.status_code == 200 for r in responses)
        pool = pool_of(proxy)
        dispatches = sum(len(w.dispatch_times) for w in pool.workers)
        assert dispatches == 100
        assert engine_of(mock).ledger_report().total_calls == 100
        assert pool.counters.accepted == pool.counters.resolved == 100

    def test_post_graphql_round_trip(self, run_mock, run_proxy):
        mock = run_mock(latency_scale=0.0)
        proxy = run_proxy(mock)
        body = json.dumps({"query": "{ repository(name: \"x\") { stargazerCount } }"}).encode()
        r = httpx.post(proxy.url + "/graphql", content=body, timeout=10)
        assert r.status_code == 200
        report = engine_of(mock).ledger_report()
        token = next(t for t in report.tokens if t.calls == 1)
        assert token.budgets["graphql"].remaining == 49
        assert token.budgets["rest"].remaining == 50


class TestProxyErrors:
    def test_slow_upstream_times_out_with_marker(self, run_mock, run_proxy):
        mock = run_mock(latency_ms={"issues": 2000.0})
        proxy = run_proxy(mock, request_timeout_ms=300)
        r = httpx.get(proxy.url + "/repos/o/r/issues", timeout=10)
        assert r.status_code == 504
        assert r.json()["proxy_error"] == "timeout"

    def test_unreachable_upstream_is_a_502(self, run_proxy, run_mock):
        mock = run_mock(latency_scale=0.0)
        proxy = run_proxy(mock, upstream_rest_url="http://127.0.0.1:9", request_timeout_ms=2000)
        r = httpx.get(proxy.url + "/repos/o/r/tags", timeout=10)
        assert r.status_code == 502
        assert r.json()["proxy_error"] == "upstream_unreachable"

    def test_queue_cap_yields_immediate_503(self, run_mock, run_proxy):
        mock = run_mock(latency_ms={"issues": 300.0})
        proxy = run_proxy(mock, tokens=(TOKENS[0],), queue_cap=1)

        async def blast():
            async with httpx.AsyncClient(base_url=proxy.url, timeout=30) as client:
                return await asyncio.gather(
                    *(client.get(f"/repos/o/r/issues?page={i}") for i in range(8))
                )

        responses = asyncio.run(blast())
        rejected = [r for r in responses if r.status_code == 503]
        assert rejected and all(r.json()["proxy_error"] == "queue_full" for r in rejected)
        assert any(r.status_code == 200 for r in responses)

    def test_all_tokens_invalid_yields_pool_exhausted(self, run_mock, run_proxy):
        mock = run_mock(latency_scale=0.0)
        proxy = run_proxy(mock)
        # Warm up so budgets (and their reset times) are known to the proxy.
        assert httpx.get(proxy.url + "/repos/o/r/tags", timeout=10).status_code == 200
        for token in TOKENS:
            httpx.post(
                mock.url + "/__mock__/invalidate", json={"token_suffix": token[-4:]}, timeout=5
            )
        first = httpx.get(proxy.url + "/repos/o/r/tags", timeout=10)
        second = httpx.get(proxy.url + "/repos/o/r/tags", timeout=10)
        assert first.status_code == 503
        assert first.json()["proxy_error"] == "pool_exhausted"
        assert "retry-after" in first.headers  # hint: earliest known budget reset
        assert second.status_code == 503

    def test_injected_abuse_is_retried_after_cooldown_and_succeeds_once(
        self, run_mock, run_proxy
    ):
        mock = run_mock(latency_scale=0.0, abuse_retry_after_s=0.2)
        proxy = run_proxy(mock, tokens=(TOKENS[0],), request_timeout_ms=10_000)
        httpx.post(mock.url + "/__mock__/abuse", json={"count": 1}, timeout=5)
        t0 = time.monotonic()
        r = httpx.get(proxy.url + "/repos/o/r/tags?page=1", timeout=15)
        elapsed = time.monotonic() - t0
        assert r.status_code == 200  # client never sees the 403
        assert elapsed >= 0.2, "retry happened before the cooldown elapsed"
        report = engine_of(mock).ledger_report()
        assert report.abuse_responses == 1
        assert report.authenticated_calls == 1  # served exactly once after retry
        assert pool_of(proxy).counters.abuse_hits == 1


class TestAuthLanes:
    def test_pool_token_is_pinned_to_its_own_worker(self, run_mock, run_proxy):
        mock = run_mock(latency_scale=0.0, limit=50)
        proxy = run_proxy(mock, assumed_limit=50)
        headers = {"authorization": f"token {TOKENS[1]}"}
        r = httpx.get(proxy.url + "/repos/o/r/tags", headers=headers, timeout=10)
        assert r.status_code == 200
        assert r.headers["x-pool-worker"] == "w1"
        report = engine_of(mock).ledger_report()
        by_suffix = {t.suffix: t for t in report.tokens}
        assert by_suffix[TOKENS[1][-4:]].calls == 1
        assert by_suffix[TOKENS[0][-4:]].calls == 0

    def test_unknown_token_takes_the_passthrough_lane(self, run_server, run_proxy):
        from poolproxy.mock_upstream import MockSettings, create_mock_app

        outsider = "outsider-tok-9999"
        settings = MockSettings(tokens=[*TOKENS, outsider], latency_scale=0.0)
        mock = run_server(create_mock_app(settings))
        proxy = run_proxy(mock)
        headers = {"authorization": f"token {outsider}"}
        r = httpx.get(proxy.url + "/repos/o/r/tags", headers=headers, timeout=10)
        assert r.status_code == 200
        assert r.headers["x-pool-worker"] == "passthrough"
        pool = pool_of(proxy)
        assert pool.counters.accepted == 0  # excluded from pool accounting
        assert proxy.app.state.passthrough_count == 1


class TestTransparencyAndSecrets:
    def test_bodies_and_statuses_pass_through_byte_exact(self, run_mock, run_proxy):
        mock = run_mock(latency_scale=0.0)
        proxy = run_proxy(mock)
        cases = [
            ("GET", "/repos/org/alpha/issues?page=1"),
            ("GET", "/repos/org/beta/stargazers?page=7"),
            ("GET", "/repos/org/missing/tags"),  # 404 passes through
            ("GET", "/search/repositories?q=proxy&page=2"),
        ]
        with httpx.Client(base_url=proxy.url, timeout=10) as client:
            for method, path in cases:
                r = client.request(method, path)
                page = 1
                if "page=" in path:
                    page = int(path.split("page=")[1].split("&")[0])
                if "missing" in path:
                    assert r.status_code == 404
                else:
                    assert r.status_code == 200
                    assert r.content == synthetic_body(path, page)

    def test_no_secret_ever_reaches_logs_headers_or_status(self, run_mock, run_server, tmp_path):
        from poolproxy.config import ProxyConfig
        from poolproxy.proxy import create_proxy_app

        log_path = tmp_path / "activity.log"
        mock = run_mock(latency_scale=0.0)
        config = ProxyConfig(
            tokens=tuple(TOKENS),
            request_interval_ms=0,
            request_timeout_ms=5000,
            monitor=False,
            log_file=str(log_path),
            upstream_rest_url=mock.url,
            upstream_graphql_url=mock.url + "/graphql",
        )
        proxy = run_server(create_proxy_app(config))
        with httpx.Client(base_url=proxy.url, timeout=10) as client:
            for i in range(5):
                resp = client.get(f"/repos/o/r/tags?page={i}")
                for value in resp.headers.values():
                    for token in TOKENS:
                        assert token not in value
            status_json = client.get("/__proxy__/status").text
            summary_json = client.get("/__proxy__/summary").text
        log_text = log_path.read_text()
        for token in TOKENS:
            assert token not in log_text
            assert token not in status_json
            assert token not in summary_json
        assert "worker=w" in log_text
