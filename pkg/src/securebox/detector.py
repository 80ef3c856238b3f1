"""Sliding-window port-scan detector.

A source is a scanner once it has touched at least ``threshold`` distinct
(dst_addr, dst_port) pairs within the last ``window`` ticks, i.e. within
[now - window + 1, now].  Each source is reported once.

Sources are opaque sortable keys: a remote address, or (box_id, address)
when tracking is scoped per gateway.
"""

from __future__ import annotations
import logging
from typing import Hashable

logger = logging.getLogger(__name__)


class PortScanDetector:
    __slots__ = ("threshold", "window", "_seen", "_detected")

    def __init__(self, threshold: int = 10, window: int = 50) -> None:
        if threshold < 1 or window < 1:
            raise ValueError("threshold and window must be positive")
        self.threshold = threshold
        self.window = window
        # source → (dst_addr, dst_port) → latest tick seen
        self._seen: dict[Hashable, dict[tuple[int, int], int]] = {}
        self._detected: dict[Hashable, int] = {}

    def observe(self, source: Hashable, dst_addr: int, dst_port: int, tick: int) -> None:
        if source in self._detected:
            return
        probes = self._seen.setdefault(source, {})
        key = (dst_addr, dst_port)
        if probes.get(key, -1) < tick:
            probes[key] = tick

    def distinct_in_window(self, source: Hashable, now: int) -> int:
        start = now - self.window + 1
        return sum(1 for t in self._seen.get(source, {}).values() if start <= t <= now)

    def detect(self, now: int) -> list[Hashable]:
        """Sources crossing the threshold at ``now``, in sorted order."""
        start = now - self.window + 1
        found = []
        for source in sorted(self._seen):
            probes = self._seen[source]
            stale = [k for k, t in probes.items() if t < start]
            for k in stale:
                del probes[k]
            if sum(1 for t in probes.values() if t <= now) >= self.threshold:
                found.append(source)
        for source in found:
            self._detected[source] = now
            del self._seen[source]
            logger.info("port scan from %s detected at tick %d", source, now)
        for source in [s for s, p in self._seen.items() if not p]:
            del self._seen[source]
        return found

    @property
    def detected(self) -> dict[Hashable, int]:
        """Source → tick it was detected."""
        return dict(self._detected)

    def is_detected(self, source: Hashable) -> bool:
        return source in self._detected
