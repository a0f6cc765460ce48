"""Deterministic discrete-event simulation core.

Provides the simulated clock (integer microseconds), the event queue,
lossy/delaying/bandwidth-limited links and seeded random number streams.
Everything above this layer (protocol, apps, topology) is driven purely by
callbacks scheduled here, so a fixed (config, seed) pair always replays the
exact same event sequence.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import random
from dataclasses import dataclass
from typing import Callable, Optional

MTU_DEFAULT = 1500
DEFAULT_QUEUE_CAPACITY = 65536

# Event kinds used in traces.
KIND_TIMER = "timer"
KIND_DELIVERY = "datagram-delivery"
KIND_APP_TICK = "app-tick"


class SimulationError(Exception):
    """A programming error inside a run, e.g. scheduling an event in the past."""


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass
class Event:
    """A queued callback. (fire_at, seq) totally orders the queue."""

    fire_at: int
    seq: int
    node: str
    kind: str
    action: Callable[[int], None]
    detail: str = ""
    cancelled: bool = False

    def cancel(self) -> None:
        self.cancelled = True


@dataclass(frozen=True)
class Datagram:
    """A UDP-style datagram addressed by (node id, port) pairs."""

    src: tuple[str, int]
    dst: tuple[str, int]
    payload: bytes

    def __post_init__(self):
        for _, port in (self.src, self.dst):
            if not 1 <= port <= 65535:
                raise SimulationError(f"port out of range: {port}")

    @property
    def size(self) -> int:
        return len(self.payload)


class Simulator:
    """Single-threaded event loop with a microsecond clock.

    Random draws go through named streams derived from the root seed by
    hashing the consumer label, so one consumer's draw count never perturbs
    another's sequence.
    """

    def __init__(self, seed: int = 1, trace: Optional[Callable[[str], None]] = None):
        self.seed = seed
        self.now = 0
        self.processed_events = 0
        self._heap: list[tuple[int, int, Event]] = []
        self._seq = 0
        self._streams: dict[str, random.Random] = {}
        self._trace = trace

    def stream(self, label: str) -> random.Random:
        """Named PRNG stream (Mersenne Twister seeded from sha256(seed/label))."""
        rng = self._streams.get(label)
        if rng is None:
            digest = hashlib.sha256(f"{self.seed}/{label}".encode()).digest()
            rng = random.Random(int.from_bytes(digest[:8], "big"))
            self._streams[label] = rng
        return rng

    def schedule(self, fire_at: int, node: str, kind: str,
                 action: Callable[[int], None], detail: str = "") -> Event:
        if fire_at < self.now:
            raise SimulationError(
                f"event scheduled in the past: fire_at={fire_at} < now={self.now}")
        ev = Event(int(fire_at), self._seq, node, kind, action, detail)
        self._seq += 1
        heapq.heappush(self._heap, (ev.fire_at, ev.seq, ev))
        return ev

    def after(self, delay: int, node: str, kind: str,
              action: Callable[[int], None], detail: str = "") -> Event:
        return self.schedule(self.now + int(delay), node, kind, action, detail)

    def run_until(self, t: int) -> int:
        """Process all events with fire_at <= t in (fire_at, seq) order.

        The clock ends at t (it never runs backwards and never overshoots t).
        Returns the number of events processed.
        """
        if t < self.now:
            raise SimulationError(f"run_until({t}) but clock already at {self.now}")
        count = 0
        heap = self._heap
        while heap and heap[0][0] <= t:
            _, _, ev = heapq.heappop(heap)
            if ev.cancelled:
                continue
            self.now = ev.fire_at
            if self._trace is not None:
                self._trace(f"{ev.fire_at}\t{ev.node}\t{ev.kind}\t{ev.detail}")
            ev.action(ev.fire_at)
            count += 1
        self.now = t
        self.processed_events += count
        return count

    def run(self) -> int:
        """Drain the queue completely; the clock stops at the last event."""
        count = 0
        heap = self._heap
        while heap:
            _, _, ev = heapq.heappop(heap)
            if ev.cancelled:
                continue
            self.now = ev.fire_at
            if self._trace is not None:
                self._trace(f"{ev.fire_at}\t{ev.node}\t{ev.kind}\t{ev.detail}")
            ev.action(ev.fire_at)
            count += 1
        self.processed_events += count
        return count


class Link:
    """Unidirectional point-to-point link with serialization, delay, loss and
    a byte-capacity tail-drop queue.

    The link transmits one datagram at a time; serialization times accumulate
    FIFO. Fractional serialization times round up so a datagram never arrives
    early. A duplex connection is modeled as two Link instances.
    """

    def __init__(self, sim: Simulator, name: str, dst_node, bandwidth_bps: int,
                 delay_us: int = 0, queue_capacity: int = DEFAULT_QUEUE_CAPACITY,
                 loss_rate: float = 0.0, mtu: int = MTU_DEFAULT):
        if bandwidth_bps <= 0:
            raise SimulationError(f"link {name}: bandwidth must be > 0")
        if not 0.0 <= loss_rate <= 1.0:
            raise SimulationError(f"link {name}: loss_rate out of [0,1]")
        self.sim = sim
        self.name = name
        self.dst_node = dst_node
        self.bandwidth_bps = bandwidth_bps
        self.delay_us = delay_us
        self.queue_capacity = queue_capacity
        self.loss_rate = loss_rate
        self.mtu = mtu
        self._rng = sim.stream(f"link:{name}")
        self._busy_until = 0
        self._queue: list[tuple[int, int]] = []  # (serialization finish, size)
        self._queued_bytes = 0
        # Indices (0-based send ordinals) force-dropped for scripted scenarios.
        self.forced_drops: set[int] = set()
        self.observer: Optional[Callable[[int, Datagram, str, Optional[int]], None]] = None
        self.sent = 0
        self.delivered = 0
        self.dropped_loss = 0
        self.dropped_queue = 0
        self.dropped_forced = 0
        self.bytes_delivered = 0

    def _expire(self, now: int) -> None:
        q = self._queue
        while q and q[0][0] <= now:
            self._queued_bytes -= q.pop(0)[1]

    def occupancy(self, now: int) -> int:
        self._expire(now)
        return self._queued_bytes

    def send(self, dgram: Datagram, now: int) -> Optional[int]:
        """Enqueue a datagram; returns delivery time, or None when dropped."""
        size = dgram.size
        if size > self.mtu:
            raise SimulationError(f"link {self.name}: datagram {size}B exceeds MTU {self.mtu}")
        idx = self.sent
        self.sent += 1
        self._expire(now)
        outcome = None
        if idx in self.forced_drops:
            self.dropped_forced += 1
            outcome = "drop-forced"
        elif self.loss_rate > 0.0 and self._rng.random() < self.loss_rate:
            self.dropped_loss += 1
            outcome = "drop-loss"
        elif self._queued_bytes + size > self.queue_capacity:
            self.dropped_queue += 1
            outcome = "drop-queue"
        if outcome is not None:
            if self.observer:
                self.observer(now, dgram, outcome, None)
            return None
        start = max(now, self._busy_until)
        finish = start + ceil_div(size * 8 * 1_000_000, self.bandwidth_bps)
        self._busy_until = finish
        self._queue.append((finish, size))
        self._queued_bytes += size
        arrival = finish + self.delay_us
        node = self.dst_node
        self.sim.schedule(
            arrival, node.node_id, KIND_DELIVERY,
            lambda t, d=dgram: node.handle_datagram(d, t),
            f"{dgram.src[0]}:{dgram.src[1]}->{dgram.dst[0]}:{dgram.dst[1]} {size}B")
        self.delivered += 1
        self.bytes_delivered += size
        if self.observer:
            self.observer(now, dgram, "sent", arrival)
        return arrival

    @property
    def dropped(self) -> int:
        return self.dropped_loss + self.dropped_queue + self.dropped_forced


@dataclass(frozen=True)
class Dist:
    """A one-dimensional sampling distribution: constant, uniform or exponential.

    sample() consumes exactly one draw from the underlying stream per call
    (inverse-CDF mapping), keeping draw counts independent of the shape.
    """

    kind: str
    a: float
    b: float = 0.0

    @classmethod
    def constant(cls, v: float) -> "Dist":
        return cls("constant", float(v))

    @classmethod
    def uniform(cls, a: float, b: float) -> "Dist":
        if a > b:
            raise ValueError(f"uniform({a},{b}): a must be <= b")
        return cls("uniform", float(a), float(b))

    @classmethod
    def exponential(cls, mean: float) -> "Dist":
        if mean <= 0:
            raise ValueError(f"exponential({mean}): mean must be > 0")
        return cls("exponential", float(mean))

    def sample(self, rng: random.Random) -> float:
        u = rng.random()
        if self.kind == "constant":
            return self.a
        if self.kind == "uniform":
            return self.a + u * (self.b - self.a)
        return -self.a * math.log1p(-u)

    def mean(self) -> float:
        if self.kind == "uniform":
            return (self.a + self.b) / 2.0
        return self.a

    def __str__(self) -> str:
        if self.kind == "constant":
            return f"constant({self.a:g})"
        if self.kind == "uniform":
            return f"uniform({self.a:g},{self.b:g})"
        return f"exponential({self.a:g})"
