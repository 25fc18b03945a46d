"""Network emulation and the platform-wide clock.

Two schedulers share one interface (``now``/``call_at``/``call_later``):

* ``VirtualScheduler`` -- a discrete-event loop over a virtual nanosecond
  clock, used by the single-process simulation mode;
* ``RealtimeScheduler`` -- an asyncio-backed loop on the host monotonic
  clock, used when nodes live in separate processes on one host.

Links draw their per-message delay and loss decisions from their own seeded
generator, so a given seed always produces the same decision sequence.
"""
from __future__ import annotations

import asyncio
import hashlib
import heapq
import itertools
import logging
import math
import random
import time
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Dict, Optional

logger = logging.getLogger(__name__)

NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


class UnknownProfile(KeyError):
    pass


@dataclass(frozen=True)
class LinkProfile:
    name: str
    one_way_delay_ms: float
    jitter_ms: float = 0.0
    loss_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.name:
            raise ValueError("profile name must be non-empty")
        if not (self.one_way_delay_ms >= 0 and math.isfinite(self.one_way_delay_ms)):
            raise ValueError("one_way_delay_ms must be >= 0")
        if not (self.jitter_ms >= 0 and math.isfinite(self.jitter_ms)):
            raise ValueError("jitter_ms must be >= 0")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError("loss_prob must be within [0, 1]")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "one_way_delay_ms": self.one_way_delay_ms,
            "jitter_ms": self.jitter_ms,
            "loss_prob": self.loss_prob,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d) -> "LinkProfile":
        return cls(
            d["name"],
            float(d["one_way_delay_ms"]),
            float(d.get("jitter_ms", 0.0)),
            float(d.get("loss_prob", 0.0)),
            int(d.get("seed", 0)),
        )


PRESETS: Dict[str, LinkProfile] = {
    "ETH": LinkProfile("ETH", 0.3, 0.05, 0.0),
    "5G-SA": LinkProfile("5G-SA", 30.0, 4.0, 0.0002),
    "BRIDGE": LinkProfile("BRIDGE", 40.0, 0.5, 0.0),
    # in-node hand-off between co-located components
    "LOCAL": LinkProfile("LOCAL", 0.0, 0.0, 0.0),
}


def derive_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big")


class Link:
    """One emulated one-way link; FIFO in send order."""

    def __init__(self, profile: LinkProfile, seed: int):
        self.profile = profile
        self.seed = seed
        self._rng = random.Random(seed)
        self._delay_ns = profile.one_way_delay_ms * NS_PER_MS
        self._jitter_ns = profile.jitter_ms * NS_PER_MS
        self._last_arrival = -1
        self.sent = 0
        self.dropped = 0

    def transmit(self, now: int) -> Optional[int]:
        """Scheduled arrival time for a message sent at ``now``, or None if lost."""
        self.sent += 1
        p = self.profile.loss_prob
        if p > 0.0 and self._rng.random() < p:
            self.dropped += 1
            return None
        d = self._delay_ns
        if self._jitter_ns > 0.0:
            d += self._rng.gauss(0.0, self._jitter_ns)
        arrival = now + max(0, int(round(d)))
        if arrival < self._last_arrival:
            arrival = self._last_arrival
        self._last_arrival = arrival
        return arrival


class Netem:
    """Registry of link profiles and factory for seeded links."""

    def __init__(self, seed: int = 0, profiles: Optional[Dict[str, LinkProfile]] = None):
        self.seed = seed
        self._profiles: Dict[str, LinkProfile] = dict(PRESETS)
        if profiles:
            self._profiles.update(profiles)
        self._links: Dict[str, Link] = {}

    def register_profile(self, profile: LinkProfile) -> None:
        self._profiles[profile.name] = profile

    def profile(self, name: str) -> LinkProfile:
        try:
            return self._profiles[name]
        except KeyError:
            raise UnknownProfile(name) from None

    def has_profile(self, name: str) -> bool:
        return name in self._profiles

    @property
    def profiles(self) -> Dict[str, LinkProfile]:
        return dict(self._profiles)

    def link(self, profile_name: str, key: str) -> Link:
        """Link for ``key``; created on first use with a seed derived from key."""
        profile = self.profile(profile_name)
        link = self._links.get(key)
        if link is None:
            link = Link(profile, derive_seed(self.seed, profile.seed, profile.name, key))
            self._links[key] = link
        return link

    def links(self) -> Dict[str, Link]:
        return dict(self._links)

    def transmit(self, profile_name: str, key: str, now: int) -> Optional[int]:
        """Arrival time of a message sent over link ``key`` at ``now``; None if dropped."""
        return self.link(profile_name, key).transmit(now)


class _CpuAccounting:
    def __init__(self):
        self.cpu_ns: Dict[str, int] = defaultdict(int)

    def _invoke(self, node, fn, args):
        if node is None:
            fn(*args)
            return
        t0 = time.thread_time_ns()
        try:
            fn(*args)
        finally:
            self.cpu_ns[node] += time.thread_time_ns() - t0


class VirtualScheduler(_CpuAccounting):
    """Discrete-event scheduler on a virtual nanosecond clock.

    Events at equal timestamps fire in insertion order. ``node`` tags an
    event with the platform node whose CPU the callback should be charged to.
    """

    virtual = True

    def __init__(self, start_ns: int = 0):
        super().__init__()
        self._now = start_ns
        self._heap = []
        self._counter = itertools.count()
        self.events_run = 0

    def now(self) -> int:
        return self._now

    def call_at(self, t: int, fn: Callable, *args, node: Optional[str] = None) -> None:
        if t < self._now:
            t = self._now
        heapq.heappush(self._heap, (t, next(self._counter), node, fn, args))

    def call_later(self, delay_ns: int, fn: Callable, *args, node: Optional[str] = None) -> None:
        self.call_at(self._now + max(0, int(delay_ns)), fn, *args, node=node)

    def pending(self) -> int:
        return len(self._heap)

    def next_time(self) -> Optional[int]:
        return self._heap[0][0] if self._heap else None

    def run(self, until: Optional[int] = None) -> None:
        """Run events with timestamp <= ``until`` (all events if None)."""
        heap = self._heap
        while heap:
            if until is not None and heap[0][0] > until:
                break
            t, _, node, fn, args = heapq.heappop(heap)
            self._now = t
            self._invoke(node, fn, args)
            self.events_run += 1
        if until is not None and until > self._now:
            self._now = until

    def run_for(self, duration_ns: int) -> None:
        self.run(self._now + duration_ns)


class RealtimeScheduler(_CpuAccounting):
    """Scheduler on the host monotonic clock, driven by an asyncio loop.

    ``time.monotonic_ns`` reads CLOCK_MONOTONIC, which is shared by every
    process on the host, so timestamps taken in different processes compare
    directly.
    """

    virtual = False

    def __init__(self, loop: Optional[asyncio.AbstractEventLoop] = None):
        super().__init__()
        self.loop = loop or asyncio.get_event_loop()

    def now(self) -> int:
        return time.monotonic_ns()

    def call_at(self, t: int, fn: Callable, *args, node: Optional[str] = None) -> None:
        delay = (t - time.monotonic_ns()) / NS_PER_S
        if delay <= 0:
            self.loop.call_soon(self._invoke, node, fn, args)
        else:
            self.loop.call_later(delay, self._invoke, node, fn, args)

    def call_later(self, delay_ns: int, fn: Callable, *args, node: Optional[str] = None) -> None:
        self.call_at(time.monotonic_ns() + max(0, int(delay_ns)), fn, *args, node=node)


class PlatformClock:
    """Shared timestamp source; never goes backwards."""

    def __init__(self, scheduler):
        self._scheduler = scheduler
        self._last = None

    def now(self) -> int:
        t = self._scheduler.now()
        if self._last is not None and t < self._last:
            t = self._last
        self._last = t
        return t
