"""Source NAT with a per-runtime address pool.

Pools of different runtimes never overlap, so an address travelling with a
migrated or recovered flow can never collide with a local allocation.  The
pool distinguishes three holdings:

``used``     own addresses held by flows living on this runtime
``lent``     own addresses held by flows that migrated elsewhere
``foreign``  other pools' addresses held by flows that migrated or were
             recovered here

``len(free) + len(used) + len(lent)`` is the pool capacity at all times.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional

from ..core import Packet
from .api import DROP, NAT_OFFSET, Action, NetworkFunction, Verdict, rewrite


def _pack(ip: int, port: int) -> int:
    return (ip << 16) | port


def _unpack(addr: int) -> tuple[int, int]:
    return addr >> 16, addr & 0xFFFF


@dataclass(slots=True)
class NatState:
    # packed (ip << 16 | port), or None before allocation
    addr: Optional[int] = None

    @property
    def address(self) -> Optional[tuple[int, int]]:
        return None if self.addr is None else _unpack(self.addr)


@dataclass
class AddressPool:
    capacity: int
    free: list[int] = field(default_factory=list)
    used: set[int] = field(default_factory=set)
    lent: set[int] = field(default_factory=set)
    foreign: set[int] = field(default_factory=set)
    # mirror of the free heap for membership tests
    free_set: set[int] = field(default_factory=set)

    @classmethod
    def full(cls, addrs: Iterable[int]) -> AddressPool:
        free = sorted(set(addrs))
        return cls(len(free), free, free_set=set(free))

    def owns(self, addr: int) -> bool:
        return addr in self.used or addr in self.lent or addr in self.free_set

    def allocate(self) -> Optional[int]:
        if not self.free:
            return None
        addr = heapq.heappop(self.free)
        self.free_set.remove(addr)
        self.used.add(addr)
        return addr

    def release(self, addr: int) -> None:
        if addr in self.used:
            self.used.remove(addr)
            heapq.heappush(self.free, addr)
            self.free_set.add(addr)
        else:
            self.foreign.discard(addr)

    def hand_out(self, addr: int) -> None:
        if addr in self.used:
            self.used.remove(addr)
            self.lent.add(addr)
        else:
            self.foreign.discard(addr)

    def take_in(self, addr: int) -> None:
        if addr in self.lent:
            self.lent.remove(addr)
            self.used.add(addr)
        else:
            self.foreign.add(addr)

    @property
    def occupied(self) -> int:
        return len(self.used) + len(self.lent)

    def conserved(self) -> bool:
        return (
            len(self.free) == len(self.free_set)
            and len(self.free) + self.occupied == self.capacity
            and self.free_set.isdisjoint(self.used)
            and self.free_set.isdisjoint(self.lent)
        )

    def held_here(self) -> set[int]:
        return self.used | self.foreign


_NAT = struct.Struct("<BIH")
_ADDR = struct.Struct("<IH")


class Nat(NetworkFunction):
    name = "nat"

    def __init__(self, ips: Iterable[int], ports: tuple[int, int] = (1024, 65535)):
        self.ips = tuple(ips)
        lo, hi = ports
        if not self.ips or lo > hi:
            raise ValueError("NAT pool needs at least one address and a non-empty port range")
        self.ports = (lo, hi)

    def allocate_shared_state(self) -> AddressPool:
        lo, hi = self.ports
        return AddressPool.full(_pack(ip, port) for ip in self.ips for port in range(lo, hi + 1))

    def allocate_new_fs(self) -> NatState:
        return NatState()

    def process_pkt(self, input_pkt: Packet, fs: NatState, ss: AddressPool) -> Verdict:
        if fs.addr is None:
            fs.addr = ss.allocate()
            if fs.addr is None:
                return DROP
        ip, port = _unpack(fs.addr)
        return Verdict(Action.Forward, rewrite(input_pkt.payload, NAT_OFFSET, _ADDR.pack(ip, port)))

    def flow_expires(self, fs: NatState, ss: AddressPool) -> None:
        if fs.addr is not None:
            ss.release(fs.addr)

    def flow_migrate_out(self, fs: NatState, ss: AddressPool) -> None:
        if fs.addr is not None:
            ss.hand_out(fs.addr)

    def flow_migrate_in(self, fs: NatState, ss: AddressPool) -> None:
        if fs.addr is not None:
            ss.take_in(fs.addr)

    flow_recover = flow_migrate_in

    def encode_state(self, fs: NatState) -> bytes:
        if fs.addr is None:
            return _NAT.pack(0, 0, 0)
        ip, port = _unpack(fs.addr)
        return _NAT.pack(1, ip, port)

    def decode_state(self, blob: bytes) -> NatState:
        has, ip, port = _NAT.unpack(blob)
        return NatState(_pack(ip, port) if has else None)
