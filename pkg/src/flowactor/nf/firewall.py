"""Stateful firewall: per-flow connection record, read-only ACL."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

from ..core import FlowKey, Packet, Proto
from .api import DROP, FLAGS_OFFSET, FORWARD, NetworkFunction, Verdict


class AclAction(enum.IntEnum):
    Allow = 0
    Deny = 1


@dataclass(frozen=True)
class AclRule:
    """A 5-tuple match where any field left as None is a wildcard."""

    action: AclAction
    src_ip: Optional[int] = None
    dst_ip: Optional[int] = None
    proto: Optional[Proto] = None
    src_port: Optional[int] = None
    dst_port: Optional[int] = None

    def matches(self, key: FlowKey) -> bool:
        return (
            (self.src_ip is None or self.src_ip == key.src_ip)
            and (self.dst_ip is None or self.dst_ip == key.dst_ip)
            and (self.proto is None or self.proto == key.proto)
            and (self.src_port is None or self.src_port == key.src_port)
            and (self.dst_port is None or self.dst_port == key.dst_port)
        )


@dataclass(frozen=True)
class Acl:
    rules: tuple[AclRule, ...] = ()
    default: AclAction = AclAction.Allow

    def decide(self, key: FlowKey) -> AclAction:
        for rule in self.rules:
            if rule.matches(key):
                return rule.action
        return self.default


UNDECIDED, ALLOWED, DENIED = 0, 1, 2


@dataclass(slots=True)
class FirewallState:
    pkt_count: int = 0
    byte_count: int = 0
    tcp_flags: int = 0
    decision: int = UNDECIDED


_FW = struct.Struct("<QQBB")


class Firewall(NetworkFunction):
    name = "firewall"

    def __init__(self, rules: Sequence[AclRule] = (), default: AclAction = AclAction.Allow):
        self.rules = tuple(rules)
        self.default = AclAction(default)

    def allocate_shared_state(self) -> Acl:
        return Acl(self.rules, self.default)

    def allocate_new_fs(self) -> FirewallState:
        return FirewallState()

    def process_pkt(self, input_pkt: Packet, fs: FirewallState, ss: Acl) -> Verdict:
        payload = input_pkt.payload
        fs.pkt_count += 1
        fs.byte_count += len(payload)
        if len(payload) > FLAGS_OFFSET:
            fs.tcp_flags |= payload[FLAGS_OFFSET]
        if fs.decision == UNDECIDED:
            # the ACL is read-only, so the first lookup holds for the flow's lifetime
            fs.decision = DENIED if ss.decide(input_pkt.key) is AclAction.Deny else ALLOWED
        return DROP if fs.decision == DENIED else FORWARD

    def encode_state(self, fs: FirewallState) -> bytes:
        return _FW.pack(fs.pkt_count, fs.byte_count, fs.tcp_flags, fs.decision)

    def decode_state(self, blob: bytes) -> FirewallState:
        return FirewallState(*_FW.unpack(blob))
