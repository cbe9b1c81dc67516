"""Least-loaded backend selection with per-server workload counters."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

from ..core import Packet
from .api import LB_OFFSET, NetworkFunction, Verdict, Action, rewrite

NO_SERVER = -1


@dataclass(slots=True)
class LbState:
    server: int = NO_SERVER


@dataclass
class ServerTable:
    addresses: tuple[int, ...]
    counters: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.addresses:
            raise ValueError("load balancer needs at least one server")
        if not self.counters:
            self.counters = [0] * len(self.addresses)

    def select(self) -> int:
        counters = self.counters
        # min() keeps the first minimum, i.e. the lowest index on ties
        return min(range(len(counters)), key=counters.__getitem__)


_LB = struct.Struct("<i")
_ADDR = struct.Struct("<I")


class LoadBalancer(NetworkFunction):
    name = "lb"

    def __init__(self, servers: Sequence[int]):
        self.servers = tuple(servers)
        self._addr_bytes = tuple(_ADDR.pack(a) for a in self.servers)

    def allocate_shared_state(self) -> ServerTable:
        return ServerTable(self.servers)

    def allocate_new_fs(self) -> LbState:
        return LbState()

    def process_pkt(self, input_pkt: Packet, fs: LbState, ss: ServerTable) -> Verdict:
        if fs.server == NO_SERVER:
            fs.server = ss.select()
            ss.counters[fs.server] += 1
        return Verdict(Action.Forward, rewrite(input_pkt.payload, LB_OFFSET, self._addr_bytes[fs.server]))

    def _release(self, fs: LbState, ss: ServerTable) -> None:
        if fs.server != NO_SERVER:
            ss.counters[fs.server] -= 1

    def _acquire(self, fs: LbState, ss: ServerTable) -> None:
        if fs.server != NO_SERVER:
            ss.counters[fs.server] += 1

    flow_expires = _release
    flow_migrate_out = _release
    flow_migrate_in = _acquire
    flow_recover = _acquire

    def encode_state(self, fs: LbState) -> bytes:
        return _LB.pack(fs.server)

    def decode_state(self, blob: bytes) -> LbState:
        return LbState(*_LB.unpack(blob))
