"""Seeded flow traffic.

Every flow gets a unique random 5-tuple, a start time, a class duration and
a constant packet rate.  Packet ``k`` of a flow carries ``gen_seq = k + 1``
in its first 8 payload bytes, TCP flags in byte 8, and seeded random bytes
after that.
"""

from __future__ import annotations

import heapq
import math
import random
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

from ..core import FlowKey, Packet, Proto
from ..nf.api import FLAGS_OFFSET, MIN_PAYLOAD, TCP_ACK, TCP_FIN, TCP_SYN
from ..sim import NS_PER_S, Simulator

_SEQ = struct.Struct("<Q")


@dataclass
class FlowClass:
    fraction: float
    duration_s: float


@dataclass
class TrafficSpec:
    flows: int = 10
    pps_per_flow: float = 10.0
    duration_s: float = 1.0
    pkt_size: int = 64
    mix: list[FlowClass] = field(default_factory=list)
    seed: int = 0
    start_s: float = 0.001
    # flows start uniformly within this window; defaults to one packet interval
    start_spread_s: Optional[float] = None
    # fraction of flows whose payload carries ``attack_pattern`` once
    attack_fraction: float = 0.0
    attack_pattern: bytes = b"attack"

    def __post_init__(self) -> None:
        if not self.mix:
            self.mix = [FlowClass(1.0, self.duration_s)]
        self.validate()

    def validate(self) -> None:
        if self.flows <= 0 or self.pps_per_flow <= 0 or self.duration_s <= 0:
            raise ValueError("flows, pps_per_flow and duration_s must be positive")
        if self.pkt_size < MIN_PAYLOAD or self.pkt_size > 1500:
            raise ValueError(f"pkt_size must be within [{MIN_PAYLOAD}, 1500]")
        if any(c.fraction <= 0 or c.duration_s <= 0 for c in self.mix):
            raise ValueError("mix fractions and durations must be positive")
        if not math.isclose(sum(c.fraction for c in self.mix), 1.0, abs_tol=1e-9):
            raise ValueError("mix fractions must sum to 1")
        if not 0.0 <= self.attack_fraction <= 1.0:
            raise ValueError("attack_fraction must be within [0, 1]")
        if self.attack_fraction and len(self.attack_pattern) > self.pkt_size - MIN_PAYLOAD:
            raise ValueError("attack pattern does not fit in the packet")


@dataclass
class FlowPlan:
    key: FlowKey
    start_ns: int
    period_ns: int
    count: int
    attack_at: int  # packet index carrying the signature, or -1

    def time_of(self, k: int) -> int:
        return self.start_ns + k * self.period_ns


def unique_keys(n: int, rng: random.Random) -> list[FlowKey]:
    keys: list[FlowKey] = []
    seen: set[FlowKey] = set()
    while len(keys) < n:
        key = FlowKey(
            (10 << 24) | rng.getrandbits(24),
            (192 << 24) | (168 << 16) | rng.getrandbits(16),
            Proto.TCP,
            rng.randrange(1024, 65536),
            rng.choice((80, 443, 8080, 5432)),
        )
        if key not in seen:
            seen.add(key)
            keys.append(key)
    return keys


def plan_flows(spec: TrafficSpec) -> list[FlowPlan]:
    rng = random.Random(spec.seed)
    keys = unique_keys(spec.flows, rng)
    period = int(round(NS_PER_S / spec.pps_per_flow))
    spread = spec.start_spread_s if spec.start_spread_s is not None else 1.0 / spec.pps_per_flow
    classes: list[FlowClass] = []
    for i, c in enumerate(spec.mix):
        take = spec.flows - len(classes) if i == len(spec.mix) - 1 else int(round(c.fraction * spec.flows))
        classes.extend([c] * max(0, min(take, spec.flows - len(classes))))
    rng.shuffle(classes)
    n_attack = int(round(spec.attack_fraction * spec.flows))
    attackers = set(rng.sample(range(spec.flows), n_attack)) if n_attack else set()
    start0 = int(spec.start_s * NS_PER_S)
    end = start0 + int(spec.duration_s * NS_PER_S)
    plans = []
    for i, (key, cls) in enumerate(zip(keys, classes)):
        start = start0 + int(rng.random() * spread * NS_PER_S)
        count = max(1, int(round(cls.duration_s * spec.pps_per_flow)))
        # nothing is generated after the traffic window closes
        count = min(count, max(0, -(-(end - start) // period)))
        attack_at = rng.randrange(count) if i in attackers and count else -1
        plans.append(FlowPlan(key, start, period, count, attack_at))
    return plans


class PacketFactory:
    """Builds the payload of packet ``k`` of a flow from the flow's own RNG."""

    def __init__(self, spec: TrafficSpec) -> None:
        self.size = spec.pkt_size
        self.pattern = spec.attack_pattern
        self.seed = spec.seed
        self._rngs: dict[FlowKey, random.Random] = {}

    def make(self, plan: FlowPlan, k: int, now: int) -> Packet:
        rng = self._rngs.get(plan.key)
        if rng is None:
            rng = self._rngs[plan.key] = random.Random(f"{self.seed}:{tuple(plan.key)}")
        if k == 0:
            flags = TCP_SYN
        elif k == plan.count - 1:
            flags = TCP_ACK | TCP_FIN
        else:
            flags = TCP_ACK
        body = bytearray(rng.randbytes(self.size - MIN_PAYLOAD))
        if k == plan.attack_at:
            body[: len(self.pattern)] = self.pattern
        payload = _SEQ.pack(k + 1) + bytes((flags,)) + bytes(MIN_PAYLOAD - FLAGS_OFFSET - 1) + bytes(body)
        if k == plan.count - 1:
            self._rngs.pop(plan.key, None)
        return Packet(plan.key, k + 1, payload, now)


def packet_times(plans: list[FlowPlan]) -> Iterator[tuple[int, FlowPlan, int]]:
    """All (time, flow, index) triples in time order; ties keep flow order."""
    heap = [(p.start_ns, i, 0) for i, p in enumerate(plans) if p.count > 0]
    heapq.heapify(heap)
    while heap:
        t, i, k = heapq.heappop(heap)
        plan = plans[i]
        yield t, plan, k
        if k + 1 < plan.count:
            heapq.heappush(heap, (plan.time_of(k + 1), i, k + 1))


class Generator:
    """Feeds planned packets into ``inject`` under the simulator clock."""

    def __init__(self, sim: Simulator, spec: TrafficSpec, inject: Callable[[Packet], None]) -> None:
        self.sim = sim
        self.spec = spec
        self.plans = plan_flows(spec)
        self.factory = PacketFactory(spec)
        self.inject = inject
        self.generated = 0
        self._it = packet_times(self.plans)
        self._next = next(self._it, None)

    @property
    def total(self) -> int:
        return sum(p.count for p in self.plans)

    def start(self) -> None:
        if self._next is not None:
            self.sim.at(self._next[0], self._fire)

    def _fire(self) -> None:
        now = self.sim.now
        make = self.factory.make
        while self._next is not None and self._next[0] <= now:
            _, plan, k = self._next
            self.generated += 1
            self.inject(make(plan, k, now))
            self._next = next(self._it, None)
        if self._next is not None:
            self.sim.at(self._next[0], self._fire)
