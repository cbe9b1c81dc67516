"""Deterministic discrete-event machinery: virtual clock, seeded links, fabric.

Virtual time is an integer count of nanoseconds.  Events scheduled for the
same instant run in scheduling order, so a run is a pure function of its
inputs and seed.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Optional

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


class Simulator:
    def __init__(self) -> None:
        self.now = 0
        self._queue: list = []
        self._seq = 0
        self._trace = hashlib.blake2b(digest_size=16)
        self.trace_events = 0

    def at(self, t: int, fn: Callable, *args: Any) -> None:
        if t < self.now:
            t = self.now
        self._seq += 1
        heapq.heappush(self._queue, (t, self._seq, fn, args))

    def after(self, delay: int, fn: Callable, *args: Any) -> None:
        self.at(self.now + delay, fn, *args)

    def run(self, until: Optional[int] = None) -> None:
        queue = self._queue
        while queue:
            if until is not None and queue[0][0] > until:
                break
            t, _, fn, args = heapq.heappop(queue)
            self.now = t
            fn(*args)
        if until is not None and self.now < until:
            self.now = until

    def pending(self) -> int:
        return len(self._queue)

    def trace(self, label: str) -> None:
        """Fold a labelled event into the run's ordered-trace digest."""
        self.trace_events += 1
        self._trace.update(f"{self.now}|{label}\n".encode())

    def trace_digest(self) -> str:
        return self._trace.hexdigest()


@dataclass
class LinkParams:
    delay_ns: int = 50 * NS_PER_US
    jitter_ns: int = 0
    loss_prob: float = 0.0
    reorder: bool = False


class SimLink:
    """One direction between two endpoints.

    Loss is decided at send time from the link's own seeded RNG.  Without
    reordering, arrival times are clamped to be non-decreasing so delivery
    order equals send order.
    """

    def __init__(
        self,
        sim: Simulator,
        src: int,
        dst: int,
        deliver: Callable[[int, Any], None],
        params: LinkParams,
        seed: int | str,
    ) -> None:
        self.sim = sim
        self.src = src
        self.dst = dst
        self.params = params
        self._deliver = deliver
        self._rng = random.Random(seed)
        self._fifo: deque = deque()
        self._heap: list = []
        self._seq = 0
        self._last_arrival = 0
        self._armed_at: Optional[int] = None
        self.silenced = False
        self.sent = 0
        self.lost = 0

    def send(self, item: Any, now: int) -> bool:
        self.sent += 1
        p = self.params
        if self.silenced or (p.loss_prob > 0.0 and self._rng.random() < p.loss_prob):
            self.lost += 1
            return False
        arrival = now + p.delay_ns
        if p.jitter_ns:
            arrival += self._rng.randrange(p.jitter_ns + 1)
        if p.reorder:
            self._seq += 1
            heapq.heappush(self._heap, (arrival, self._seq, item))
            head = self._heap[0][0]
        else:
            if arrival < self._last_arrival:
                arrival = self._last_arrival
            self._last_arrival = arrival
            self._fifo.append((arrival, item))
            head = self._fifo[0][0]
        self._arm(head)
        return True

    def _arm(self, t: int) -> None:
        if self._armed_at is None or t < self._armed_at:
            self._armed_at = t
            self.sim.at(t, self._on_timer, t)

    def _on_timer(self, t: int) -> None:
        if self._armed_at != t:
            return
        self._armed_at = None
        for item in self.sim_deliver(self.sim.now):
            self._deliver(self.src, item)
        head = self.next_arrival()
        if head is not None:
            self._arm(head)

    def sim_deliver(self, now: int) -> list:
        """Release every in-flight item whose arrival time is <= now."""
        ready = []
        if self.params.reorder:
            heap = self._heap
            while heap and heap[0][0] <= now:
                ready.append(heapq.heappop(heap)[2])
        else:
            fifo = self._fifo
            while fifo and fifo[0][0] <= now:
                ready.append(fifo.popleft()[1])
        return ready

    def next_arrival(self) -> Optional[int]:
        if self.params.reorder:
            return self._heap[0][0] if self._heap else None
        return self._fifo[0][0] if self._fifo else None

    def in_flight(self) -> list:
        if self.params.reorder:
            return [entry[2] for entry in self._heap]
        return [entry[1] for entry in self._fifo]


class Fabric:
    """Full mesh of lazily created links between registered endpoints.

    All traffic between two endpoints, dataplane and control alike, shares
    one link per direction.
    """

    def __init__(self, sim: Simulator, params: LinkParams, seed: int = 0) -> None:
        self.sim = sim
        self.params = params
        self.seed = seed
        self.links: dict[tuple[int, int], SimLink] = {}
        self.endpoints: dict[int, Callable[[int, Any], None]] = {}
        self.overrides: dict[tuple[int, int], LinkParams] = {}
        # called for items arriving at a detached (dead) endpoint
        self.on_undeliverable: Callable[[int, int, Any], None] = lambda src, dst, item: None
        # called for items the link itself dropped (loss or silenced)
        self.on_lost: Callable[[int, int, Any], None] = lambda src, dst, item: None

    def attach(self, node_id: int, receive: Callable[[int, Any], None]) -> None:
        self.endpoints[node_id] = receive

    def detach(self, node_id: int) -> None:
        self.endpoints.pop(node_id, None)

    def link(self, src: int, dst: int) -> SimLink:
        lk = self.links.get((src, dst))
        if lk is None:
            params = self.overrides.get((src, dst), self.params)
            lk = SimLink(self.sim, src, dst, self._make_sink(dst), params, f"{self.seed}:{src}:{dst}")
            self.links[(src, dst)] = lk
        return lk

    def _make_sink(self, dst: int) -> Callable[[int, Any], None]:
        def sink(src: int, item: Any) -> None:
            receive = self.endpoints.get(dst)
            if receive is None:
                self.on_undeliverable(src, dst, item)
            else:
                receive(src, item)

        return sink

    def send(self, src: int, dst: int, item: Any) -> bool:
        if self.link(src, dst).send(item, self.sim.now):
            return True
        self.on_lost(src, dst, item)
        return False

    def silence(self, a: int, b: int, on: bool = True) -> None:
        self.link(a, b).silenced = on
        self.link(b, a).silenced = on
