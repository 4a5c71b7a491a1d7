"""Content-addressed object store with a latency and concurrency model."""

from __future__ import annotations

import bisect
import os
import threading
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import crypto
from .sim import Simulator

BASE_LATENCY_MS = 50
BANDWIDTH_BYTES_PER_S = 50_000_000
CONCURRENCY_LIMIT = 128


class StorageFull(Exception):
    pass


@dataclass(frozen=True)
class StoreStats:
    object_count: int
    total_bytes: int
    put_rate: float  # bytes per minute over the window
    request_rate: float  # completed puts per second over the window


class ContentStore:
    """Objects are keyed by the digest of their bytes.

    ``put`` is the direct call: the object is committed immediately and the
    completion is logged one service latency later. ``submit_put`` goes
    through the simulator: at most ``concurrency_limit`` puts are in service
    at once and the rest wait in FIFO order, which caps completed throughput
    at ``concurrency_limit / latency``.
    """

    def __init__(
        self,
        sim: Simulator | None = None,
        base_latency_ms: int = BASE_LATENCY_MS,
        bandwidth_bytes_per_s: int = BANDWIDTH_BYTES_PER_S,
        concurrency_limit: int = CONCURRENCY_LIMIT,
        capacity_bytes: int | None = None,
        persist_dir: str | os.PathLike | None = None,
        stats_window_ms: int = 60_000,
    ) -> None:
        if concurrency_limit < 1:
            raise ValueError("concurrency_limit must be positive")
        self.sim = sim or Simulator()
        self.base_latency_ms = base_latency_ms
        self.bandwidth_bytes_per_s = bandwidth_bytes_per_s
        self.concurrency_limit = concurrency_limit
        self.capacity_bytes = capacity_bytes
        self.stats_window_ms = stats_window_ms
        self._objects: dict[bytes, bytes] = {}
        self._total_bytes = 0
        self._lock = threading.Lock()
        self._in_service = 0
        self._waiting: deque[tuple[bytes, Callable | None]] = deque()
        # completion log, kept sorted by time
        self._done_t: list[int] = []
        self._done_size: list[int] = []
        self.failed_puts = 0
        self.persist_dir = Path(persist_dir) if persist_dir is not None else None
        if self.persist_dir is not None:
            self.persist_dir.mkdir(parents=True, exist_ok=True)
            for path in sorted(self.persist_dir.iterdir()):
                data = path.read_bytes()
                if crypto.hash(data).hex() == path.name:
                    self._objects[crypto.hash(data)] = data
                    self._total_bytes += len(data)

    def latency_ms(self, size: int) -> int:
        return self.base_latency_ms + -(-size * 1000 // self.bandwidth_bytes_per_s)

    def _commit(self, data: bytes) -> bytes:
        digest = crypto.hash(data)
        with self._lock:
            if digest not in self._objects:
                if self.capacity_bytes is not None and self._total_bytes + len(data) > self.capacity_bytes:
                    raise StorageFull(f"storing {len(data)} bytes would exceed capacity {self.capacity_bytes}")
                self._objects[digest] = data
                self._total_bytes += len(data)
                if self.persist_dir is not None:
                    (self.persist_dir / digest.hex()).write_bytes(data)
        return digest

    def _log(self, when: int, size: int) -> None:
        with self._lock:
            i = bisect.bisect_right(self._done_t, when)
            self._done_t.insert(i, when)
            self._done_size.insert(i, size)

    def put(self, data: bytes) -> bytes:
        data = bytes(data)
        try:
            digest = self._commit(data)
        except StorageFull:
            self.failed_puts += 1
            raise
        self._log(self.sim.now + self.latency_ms(len(data)), len(data))
        return digest

    def submit_put(self, data: bytes, on_done: Callable[[bytes | None, Exception | None], None] | None = None) -> None:
        """Queue a put on the simulator; ``on_done(digest, error)`` fires on completion."""
        data = bytes(data)
        if self._in_service < self.concurrency_limit:
            self._start(data, on_done)
        else:
            self._waiting.append((data, on_done))

    @property
    def backlog(self) -> int:
        return self._in_service + len(self._waiting)

    def _start(self, data: bytes, on_done) -> None:
        self._in_service += 1
        self.sim.schedule(self.latency_ms(len(data)), self._finish, data, on_done)

    def _finish(self, data: bytes, on_done) -> None:
        self._in_service -= 1
        if self._waiting:
            self._start(*self._waiting.popleft())
        try:
            digest = self._commit(data)
        except StorageFull as exc:
            self.failed_puts += 1
            if on_done is not None:
                on_done(None, exc)
            return
        self._log(self.sim.now, len(data))
        if on_done is not None:
            on_done(digest, None)

    def get(self, digest: bytes) -> bytes | None:
        """Stored bytes, or None when the digest is unknown."""
        return self._objects.get(digest)

    def __contains__(self, digest: bytes) -> bool:
        return digest in self._objects

    def ingress(self, start_ms: int, end_ms: int) -> tuple[int, int]:
        """(completed puts, bytes) with completion time in [start_ms, end_ms)."""
        lo = bisect.bisect_left(self._done_t, start_ms)
        hi = bisect.bisect_left(self._done_t, end_ms)
        return hi - lo, sum(self._done_size[lo:hi])

    def stats(self) -> StoreStats:
        end = self.sim.now + 1
        count, size = self.ingress(end - self.stats_window_ms, end)
        window_s = self.stats_window_ms / 1000
        return StoreStats(
            object_count=len(self._objects),
            total_bytes=self._total_bytes,
            put_rate=size / (window_s / 60),
            request_rate=count / window_s,
        )
