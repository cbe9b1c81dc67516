"""Intrusion prevention: payload scanning with a shared Aho-Corasick automaton.

The automaton position persists across the packets of a flow, so a
signature split over two packets is still caught.  Once a signature is
seen the flow is latched as blocked.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable

from ..core import Packet
from .ahocorasick import AcAutomaton, ac_build, ac_first_hit
from .api import DROP, FORWARD, MIN_PAYLOAD, NetworkFunction, Verdict


@dataclass(slots=True)
class IpsState:
    node_index: int = 0
    blocked: bool = False


_IPS = struct.Struct("<IB")


class Ips(NetworkFunction):
    name = "ips"

    def __init__(self, signatures: Iterable[bytes]):
        self.signatures = tuple(bytes(s) for s in signatures)
        self._automaton = ac_build(self.signatures)

    def allocate_shared_state(self) -> AcAutomaton:
        return self._automaton

    def allocate_new_fs(self) -> IpsState:
        return IpsState()

    def process_pkt(self, input_pkt: Packet, fs: IpsState, ss: AcAutomaton) -> Verdict:
        if fs.blocked:
            return DROP
        # header region is excluded: only application bytes are scanned
        node, hit = ac_first_hit(ss, fs.node_index, input_pkt.payload[MIN_PAYLOAD:])
        fs.node_index = node
        if hit:
            fs.blocked = True
            return DROP
        return FORWARD

    def encode_state(self, fs: IpsState) -> bytes:
        return _IPS.pack(fs.node_index, 1 if fs.blocked else 0)

    def decode_state(self, blob: bytes) -> IpsState:
        node, blocked = _IPS.unpack(blob)
        return IpsState(node, bool(blocked))
