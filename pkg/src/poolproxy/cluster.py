"""Optional multi-instance mode: one token pool shared by several proxies.

Tokens are partitioned across live instances by rendezvous hashing; ownership
is asserted through expiring leases gossiped over TCP (length-prefixed JSON
frames, static peer list). Per-token serialization is preserved because a
token is only ever activated by the instance that both wins the hash and sees
no live foreign lease. With clustering disabled none of this runs.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import struct
import time
from collections.abc import Callable, Iterable
from dataclasses import dataclass

logger = logging.getLogger(__name__)

DEFAULT_LEASE_TTL_S = 15.0
_LEN = struct.Struct(">I")
_MAX_FRAME = 1 << 20


def fingerprint(secret: str) -> str:
    """Stable non-reversible token identity for the wire (never the secret)."""
    return hashlib.sha256(secret.encode()).hexdigest()[:16]


def rendezvous_owner(fp: str, instance_ids: Iterable[str]) -> str:
    """Highest-random-weight owner of a token among the given instances."""
    ids = sorted(set(instance_ids))
    if not ids:
        raise ValueError("rendezvous over an empty instance set")
    return max(ids, key=lambda iid: hashlib.sha256(f"{fp}|{iid}".encode()).digest())


def encode_frame(message: dict) -> bytes:
    payload = json.dumps(message, separators=(",", ":")).encode()
    return _LEN.pack(len(payload)) + payload


async def read_frames(reader: asyncio.StreamReader):
    while True:
        try:
            header = await reader.readexactly(_LEN.size)
        except (asyncio.IncompleteReadError, ConnectionError):
            return
        (length,) = _LEN.unpack(header)
        if length > _MAX_FRAME:
            logger.warning("oversized cluster frame (%d bytes) dropped; closing", length)
            return
        try:
            payload = await reader.readexactly(length)
        except (asyncio.IncompleteReadError, ConnectionError):
            return
        try:
            yield json.loads(payload)
        except json.JSONDecodeError:
            logger.warning("undecodable cluster frame dropped")


@dataclass
class LeaseView:
    holder: str
    expiry: float  # epoch seconds


OwnershipCallback = Callable[[set[str], dict[str, dict]], None]


class LeaseCoordinator:
    """Per-instance lease maintenance: liveness, ownership, budget gossip."""

    def __init__(
        self,
        instance_id: str,
        secrets: Iterable[str],
        peers: list[tuple[str, int]],
        listen_host: str = "127.0.0.1",
        listen_port: int = 0,
        *,
        ttl_s: float = DEFAULT_LEASE_TTL_S,
        wall: Callable[[], float] = time.time,
        on_ownership: OwnershipCallback | None = None,
        budget_source: Callable[[], dict[str, dict]] | None = None,
        drain_check: Callable[[str], bool] | None = None,
    ) -> None:
        self.instance_id = instance_id
        self.fingerprints = [fingerprint(s) for s in secrets]
        self.peers = peers
        self._listen_host = listen_host
        self._listen_port = listen_port
        self.ttl_s = ttl_s
        self._wall = wall
        self._on_ownership = on_ownership
        self._budget_source = budget_source
        self._drain_check = drain_check
        self.heard: dict[str, float] = {}
        self.leases: dict[str, LeaseView] = {}
        self.budget_cache: dict[str, tuple[float, dict]] = {}
        self.owned: set[str] = set()
        self._releasing: set[str] = set()
        self._grace_until = 0.0
        self._server: asyncio.base_events.Server | None = None
        self._task: asyncio.Task | None = None
        self.port = listen_port

    # -- lifecycle ---------------------------------------------------------

    async def start(self) -> None:
        self._server = await asyncio.start_server(
            self._handle_conn, self._listen_host, self._listen_port
        )
        self.port = self._server.sockets[0].getsockname()[1]
        # A lone instance may own everything at once; with peers, listen for
        # one TTL first so simultaneous starts agree on the live set before
        # anyone activates a token.
        self._grace_until = self._wall() + (self.ttl_s if self.peers else 0.0)
        self._task = asyncio.create_task(self._renew_loop(), name=f"leases-{self.instance_id}")

    async def aclose(self, *, graceful: bool = True) -> None:
        """Stop. Graceful shutdown hands leases back; `graceful=False` models a crash."""
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
        if graceful and (self.owned or self._releasing):
            frames = [
                {"type": "release", "instance": self.instance_id, "fingerprint": fp}
                for fp in self.owned | self._releasing
            ]
            await self._broadcast(frames)
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    # -- protocol ----------------------------------------------------------

    def live_instances(self, now: float) -> list[str]:
        live = {self.instance_id}
        live.update(iid for iid, ts in self.heard.items() if now - ts < self.ttl_s)
        return sorted(live)

    def recompute(self, now: float | None = None) -> None:
        """Re-derive the owned token set from liveness, hashing, and leases."""
        now = self._wall() if now is None else now
        live = self.live_instances(now)
        if now < self._grace_until:
            desired: set[str] = set()
        else:
            desired = {fp for fp in self.fingerprints if rendezvous_owner(fp, live) == self.instance_id}
        new_owned: set[str] = set()
        for fp in desired:
            if fp in self.owned:
                new_owned.add(fp)
                continue
            lease = self.leases.get(fp)
            if lease is None or lease.holder == self.instance_id or lease.expiry <= now:
                new_owned.add(fp)
        lost = self.owned - new_owned
        if lost:
            self._releasing.update(lost)
            logger.info("%s: releasing %s", self.instance_id, sorted(lost))
        if new_owned != self.owned:
            self.owned = new_owned
            self._notify_ownership()

    def _notify_ownership(self) -> None:
        if self._on_ownership is None:
            return
        seeds = {
            fp: cached for fp, (_, cached) in self.budget_cache.items() if fp in self.owned
        }
        self._on_ownership(set(self.owned), seeds)

    async def _renew_loop(self) -> None:
        period = self.ttl_s / 3.0
        while True:
            now = self._wall()
            self.recompute(now)
            frames = []
            budgets = {}
            if self._budget_source is not None and self.owned:
                try:
                    budgets = self._budget_source()
                except Exception:  # noqa: BLE001
                    logger.exception("budget export failed")
            for fp in self.owned:
                expiry = now + self.ttl_s
                self.leases[fp] = LeaseView(self.instance_id, expiry)
                frames.append(
                    {
                        "type": "lease",
                        "instance": self.instance_id,
                        "fingerprint": fp,
                        "expiry": expiry,
                        "budgets": budgets.get(fp),
                        "observed_at": now,
                    }
                )
            for fp in list(self._releasing):
                if self._drain_check is not None and self._drain_check(fp):
                    continue  # a request is still in flight; keep the lease fenced
                self._releasing.discard(fp)
                if self.leases.get(fp, LeaseView("", 0)).holder == self.instance_id:
                    self.leases[fp] = LeaseView(self.instance_id, 0.0)
                frames.append(
                    {"type": "release", "instance": self.instance_id, "fingerprint": fp}
                )
            if not frames:
                frames.append({"type": "hello", "instance": self.instance_id})
            await self._broadcast(frames)
            await asyncio.sleep(period)

    async def _broadcast(self, frames: list[dict]) -> None:
        if not self.peers:
            return
        data = b"".join(encode_frame(f) for f in frames)
        for host, port in self.peers:
            try:
                reader, writer = await asyncio.open_connection(host, port)
                writer.write(data)
                await writer.drain()
                writer.close()
                await writer.wait_closed()
            except OSError:
                logger.debug("peer %s:%d unreachable", host, port)

    def ingest(self, message: dict) -> None:
        """Apply one gossip frame. Self-published and stale frames are no-ops."""
        instance = message.get("instance")
        if not instance or instance == self.instance_id:
            return
        self.heard[instance] = self._wall()
        kind = message.get("type")
        if kind == "lease":
            fp = message.get("fingerprint")
            if not fp:
                return
            expiry = float(message.get("expiry", 0.0))
            current = self.leases.get(fp)
            if current is None or current.holder == instance or expiry > current.expiry:
                self.leases[fp] = LeaseView(instance, expiry)
            budgets = message.get("budgets")
            observed = float(message.get("observed_at", 0.0))
            if budgets:
                cached_at = self.budget_cache.get(fp, (0.0, None))[0]
                if observed > cached_at:
                    self.budget_cache[fp] = (observed, budgets)
        elif kind == "release":
            fp = message.get("fingerprint")
            lease = self.leases.get(fp or "")
            if fp and lease is not None and lease.holder == instance:
                self.leases[fp] = LeaseView(instance, 0.0)
        self.recompute()

    async def _handle_conn(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter
    ) -> None:
        try:
            async for message in read_frames(reader):
                self.ingest(message)
        finally:
            writer.close()


def parse_hostport(text: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return (host or default_host, int(port))


async def start_coordinator(config, pool) -> LeaseCoordinator:
    """Wire a coordinator to a pool for `--clustering` mode."""
    listen = config.cluster_listen or f"127.0.0.1:{config.port + 1000}"
    host, port = parse_hostport(listen)
    instance_id = config.instance_id or f"{host}:{port}"
    peers = [parse_hostport(p) for p in config.peers]

    def on_ownership(owned: set[str], seeds: dict[str, dict]) -> None:
        pool.apply_ownership(owned, seeds, fingerprint=fingerprint)

    def drain_check(fp: str) -> bool:
        return any(w.in_flight for w in pool.workers if fingerprint(w.secret) == fp)

    coordinator = LeaseCoordinator(
        instance_id,
        list(config.tokens),
        peers,
        host,
        port,
        ttl_s=config.lease_ttl_s,
        on_ownership=on_ownership,
        budget_source=lambda: pool.budget_export(fingerprint),
        drain_check=drain_check,
    )
    # Nothing is owned until the coordinator grants it.
    pool.apply_ownership(set(), None, fingerprint=fingerprint)
    await coordinator.start()
    return coordinator
