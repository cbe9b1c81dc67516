"""The contract every network function implements.

A flow actor owns one flow state per NF of its chain; each runtime owns one
shared-state singleton per NF (held by its storage actor).  The runtime
lends the singleton to a flow actor for the duration of a single
``process_pkt`` call.

Simulated payload layout (offsets into ``Packet.payload``)::

    [0:8]    generator sequence number, reserved for the harness
    [8]      TCP flags byte set by the generator
    [9:15]   translated source (u32 ip, u16 port), written by the NAT
    [15:19]  selected backend address (u32), written by the load balancer
"""

from __future__ import annotations

import enum
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Optional, Sequence

from ..core import Packet

FLAGS_OFFSET = 8
NAT_OFFSET = 9
LB_OFFSET = 15
MIN_PAYLOAD = 19

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_ACK = 0x10


class Action(enum.IntEnum):
    Forward = 0
    Drop = 1


@dataclass(frozen=True, slots=True)
class Verdict:
    action: Action
    mutated_payload: Optional[bytes] = None

    def __post_init__(self) -> None:
        if self.action is Action.Drop and self.mutated_payload is not None:
            raise ValueError("a Drop verdict carries no payload")


FORWARD = Verdict(Action.Forward)
DROP = Verdict(Action.Drop)


def rewrite(payload: bytes, offset: int, data: bytes) -> bytes:
    """Return ``payload`` with ``data`` written at ``offset``, padding with zeros if short."""
    end = offset + len(data)
    if len(payload) < end:
        payload = payload + bytes(end - len(payload))
    return payload[:offset] + data + payload[end:]


class NetworkFunction(ABC):
    """Base class for NFs.  Subclasses override the hooks they need.

    ``encode_state``/``decode_state`` form the flow-state codec and must
    round-trip every state the NF can produce.
    """

    name: str = "nf"

    @abstractmethod
    def allocate_shared_state(self) -> Any: ...

    @abstractmethod
    def allocate_new_fs(self) -> Any: ...

    @abstractmethod
    def process_pkt(self, input_pkt: Packet, fs: Any, ss: Any) -> Verdict: ...

    def deallocate_fs(self, fs: Any) -> None:
        pass

    def flow_expires(self, fs: Any, ss: Any) -> None:
        pass

    def flow_migrate_out(self, fs: Any, ss: Any) -> None:
        pass

    def flow_migrate_in(self, fs: Any, ss: Any) -> None:
        pass

    def flow_recover(self, fs: Any, ss: Any) -> None:
        pass

    @abstractmethod
    def encode_state(self, fs: Any) -> bytes: ...

    @abstractmethod
    def decode_state(self, blob: bytes) -> Any: ...


@dataclass
class ServiceChain:
    name: str
    nfs: Sequence[NetworkFunction]

    def __post_init__(self) -> None:
        if not self.nfs:
            raise ValueError("a service chain needs at least one NF")
        names = [nf.name for nf in self.nfs]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate NF names in chain {self.name!r}: {names}")
        self.nfs = tuple(self.nfs)

    def __len__(self) -> int:
        return len(self.nfs)
