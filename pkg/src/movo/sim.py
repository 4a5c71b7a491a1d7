"""Discrete-event virtual clock.

Time is an integer count of milliseconds. Events scheduled for the same
instant fire in scheduling order, so a run is fully determined by its inputs.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from typing import Any, Callable

logger = logging.getLogger(__name__)


class Simulator:
    def __init__(self, start_ms: int = 0) -> None:
        self.now = start_ms
        self._queue: list[tuple[int, int, Callable[..., Any], tuple]] = []
        self._seq = itertools.count()
        self.events_run = 0

    def at(self, when: int, fn: Callable[..., Any], *args: Any) -> None:
        if when < self.now:
            raise ValueError(f"cannot schedule in the past ({when} < {self.now})")
        heapq.heappush(self._queue, (int(when), next(self._seq), fn, args))

    def schedule(self, delay: int, fn: Callable[..., Any], *args: Any) -> None:
        self.at(self.now + max(0, int(delay)), fn, *args)

    def pending(self) -> int:
        return len(self._queue)

    def step(self) -> bool:
        if not self._queue:
            return False
        when, _, fn, args = heapq.heappop(self._queue)
        self.now = when
        self.events_run += 1
        fn(*args)
        return True

    def run(self, until: int | None = None) -> None:
        """Process events up to and including ``until`` (or until idle)."""
        while self._queue and (until is None or self._queue[0][0] <= until):
            self.step()
        if until is not None and until > self.now:
            self.now = until

    def run_until(self, predicate: Callable[[], bool], limit: int | None = None) -> bool:
        """Step until ``predicate()`` holds. Returns False if the queue drains first."""
        while not predicate():
            if limit is not None and self._queue and self._queue[0][0] > limit:
                return False
            if not self.step():
                return predicate()
        return True
