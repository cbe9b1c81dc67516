"""Domain types shared by every part of the system, and their byte encoding.

The wire encoding of an :class:`ActorMessage` is length-prefixed and
little-endian::

    u32  length of everything that follows
    u8   kind tag
    u32  src runtime id
    u32  dst runtime id
    u64  correlation id
    u8   key flag (0 = absent, 1 = present)
    [13] flow key (u32 src_ip, u32 dst_ip, u8 proto, u16 src_port, u16 dst_port)
    ...  kind-specific body (at most 64 KiB)

See ``docs/wire-format.md`` for the body layouts.
"""

from __future__ import annotations

import enum
import ipaddress
import json
import struct
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Optional, Union

MTU = 1500
MAX_BODY = 64 * 1024
COORDINATOR_ID = 0


class EncodeTooLarge(ValueError):
    """Raised when a message body exceeds :data:`MAX_BODY` bytes."""


class DecodeError(ValueError):
    """Raised for truncated or malformed byte strings."""


class Proto(enum.IntEnum):
    TCP = 6
    UDP = 17


class FlowKey(NamedTuple):
    """The 5-tuple identifying a flow.

    Being a tuple, it is hashable, compares bit-exactly and orders
    lexicographically over its fields.
    """

    src_ip: int
    dst_ip: int
    proto: Proto
    src_port: int
    dst_port: int

    @classmethod
    def of(cls, src_ip, dst_ip, proto=Proto.TCP, src_port=0, dst_port=0) -> FlowKey:
        """Build a key from dotted-quad strings or ints, validating field widths."""
        key = cls(_ip(src_ip), _ip(dst_ip), Proto(proto), int(src_port), int(dst_port))
        key.validate()
        return key

    def validate(self) -> None:
        if not (0 <= self.src_ip < 2**32 and 0 <= self.dst_ip < 2**32):
            raise ValueError(f"address out of range in {self!r}")
        if not (0 <= self.src_port < 2**16 and 0 <= self.dst_port < 2**16):
            raise ValueError(f"port out of range in {self!r}")
        Proto(self.proto)

    def __str__(self) -> str:
        return (
            f"{ipaddress.IPv4Address(self.src_ip)}:{self.src_port}->"
            f"{ipaddress.IPv4Address(self.dst_ip)}:{self.dst_port}/{Proto(self.proto).name}"
        )


def _ip(value: Union[int, str]) -> int:
    if isinstance(value, int):
        return value
    return int(ipaddress.IPv4Address(value))


@dataclass(slots=True)
class Packet:
    """One simulated dataplane packet.

    ``gen_seq`` is harness metadata; the generator also stamps it into the
    first 8 payload bytes so it survives the wire encoding.
    """

    key: FlowKey
    gen_seq: int
    payload: bytes
    ts_created: int = 0
    ts_emitted: Optional[int] = None

    def __post_init__(self) -> None:
        if len(self.payload) > MTU:
            raise ValueError(f"payload of {len(self.payload)} bytes exceeds MTU {MTU}")


def flow_key_of(pkt: Packet) -> FlowKey:
    return pkt.key


class Role(enum.IntEnum):
    Runtime = 0
    VirtualSwitch = 1


@dataclass
class WorkloadReport:
    dropped_packets: int = 0
    throughput_pps: float = 0.0
    active_flows: int = 0

    def __post_init__(self) -> None:
        if self.dropped_packets < 0 or self.throughput_pps < 0 or self.active_flows < 0:
            raise ValueError(f"negative workload field in {self!r}")

    def to_dict(self) -> dict:
        return {
            "dropped_packets": self.dropped_packets,
            "throughput_pps": self.throughput_pps,
            "active_flows": self.active_flows,
        }

    @classmethod
    def from_dict(cls, d: dict) -> WorkloadReport:
        return cls(int(d["dropped_packets"]), float(d["throughput_pps"]), int(d["active_flows"]))


@dataclass
class Member:
    runtime_id: int
    role: Role
    control_addr: str = ""
    data_addr: str = ""
    workload: WorkloadReport = field(default_factory=WorkloadReport)
    # False for standby runtimes and runtimes being drained for scale-in;
    # virtual switches never dispatch new flows to them.
    accepting: bool = True

    def to_dict(self) -> dict:
        return {
            "runtime_id": self.runtime_id,
            "role": self.role.name,
            "control_addr": self.control_addr,
            "data_addr": self.data_addr,
            "workload": self.workload.to_dict(),
            "accepting": self.accepting,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Member:
        return cls(
            int(d["runtime_id"]),
            Role[d["role"]],
            d.get("control_addr", ""),
            d.get("data_addr", ""),
            WorkloadReport.from_dict(d.get("workload", {"dropped_packets": 0, "throughput_pps": 0, "active_flows": 0})),
            bool(d.get("accepting", True)),
        )


@dataclass
class ClusterConfig:
    cluster_id: int
    epoch: int
    members: list[Member] = field(default_factory=list)

    def __post_init__(self) -> None:
        ids = [m.runtime_id for m in self.members]
        if len(ids) != len(set(ids)):
            raise ValueError(f"duplicate member ids in cluster {self.cluster_id}: {ids}")
        if COORDINATOR_ID in ids:
            raise ValueError("runtime id 0 is reserved for the coordinator")

    def runtimes(self) -> list[Member]:
        return [m for m in self.members if m.role is Role.Runtime]

    def vswitches(self) -> list[Member]:
        return [m for m in self.members if m.role is Role.VirtualSwitch]

    def member(self, runtime_id: int) -> Optional[Member]:
        for m in self.members:
            if m.runtime_id == runtime_id:
                return m
        return None

    def to_dict(self) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "epoch": self.epoch,
            "members": [m.to_dict() for m in self.members],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ClusterConfig:
        return cls(int(d["cluster_id"]), int(d["epoch"]), [Member.from_dict(m) for m in d["members"]])


@dataclass(frozen=True)
class FlowStateBundle:
    """Per-NF opaque state blobs of one flow, in service-chain order."""

    chain_name: str
    blobs: tuple[bytes, ...]


class MsgKind(enum.IntEnum):
    MigrationCreateReq = 1
    MigrationCreateResp = 2
    RouteUpdateReq = 3
    RouteUpdateResp = 4
    StateTransferReq = 5
    StateTransferResp = 6
    DestroyTarget = 7
    ReplicationData = 8
    RecoverRouteReq = 9
    RecoverRouteResp = 10
    Rpc = 11
    RpcResp = 12
    Heartbeat = 13
    HeartbeatAck = 14


@dataclass(frozen=True)
class Status:
    """Body of the flag-carrying responses (found / created / ok)."""

    ok: bool


@dataclass(frozen=True)
class RouteTarget:
    dest: int


@dataclass(frozen=True)
class Replication:
    """Replication body: the processed packet plus the post-processing states.

    ``ingress`` names the virtual switch the flow enters through, so a
    replica knows whom to ask for the route change on recovery.
    """

    packet: Packet
    bundle: FlowStateBundle
    ingress: int


@dataclass(frozen=True)
class RpcCall:
    method: str
    args: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RpcReply:
    ok: bool
    result: Any = None
    error: str = ""


Body = Union[None, Status, RouteTarget, FlowStateBundle, Replication, RpcCall, RpcReply]


@dataclass(frozen=True)
class ActorMessage:
    kind: MsgKind
    src: int
    dst: int
    key: Optional[FlowKey] = None
    correlation_id: int = 0
    body: Body = None


# --- encoding ---------------------------------------------------------------

_HDR = struct.Struct("<BIIQB")
_KEY = struct.Struct("<IIBHH")
_LEN = struct.Struct("<I")
_PKT = struct.Struct("<QqqH")
_KEY_PKT = struct.Struct("<IIBHHQqqH")
_PROTOS = {int(p): p for p in Proto}
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")

_BODY_TYPE: dict[MsgKind, Optional[type]] = {
    MsgKind.MigrationCreateReq: None,
    MsgKind.MigrationCreateResp: Status,
    MsgKind.RouteUpdateReq: RouteTarget,
    MsgKind.RouteUpdateResp: Status,
    MsgKind.StateTransferReq: FlowStateBundle,
    MsgKind.StateTransferResp: Status,
    MsgKind.DestroyTarget: None,
    MsgKind.ReplicationData: Replication,
    MsgKind.RecoverRouteReq: None,
    MsgKind.RecoverRouteResp: Status,
    MsgKind.Rpc: RpcCall,
    MsgKind.RpcResp: RpcReply,
    MsgKind.Heartbeat: None,
    MsgKind.HeartbeatAck: None,
}


def encode_key(key: FlowKey) -> bytes:
    return _KEY.pack(key.src_ip, key.dst_ip, int(key.proto), key.src_port, key.dst_port)


def decode_key(buf, offset: int = 0) -> FlowKey:
    s, d, p, sp, dp = _KEY.unpack_from(buf, offset)
    proto = _PROTOS.get(p)
    return FlowKey(s, d, Proto(p) if proto is None else proto, sp, dp)


def encode_packet(pkt: Packet) -> bytes:
    emitted = -1 if pkt.ts_emitted is None else pkt.ts_emitted
    return b"".join(
        (encode_key(pkt.key), _PKT.pack(pkt.gen_seq, pkt.ts_created, emitted, len(pkt.payload)), pkt.payload)
    )


def decode_packet(buf, offset: int = 0) -> tuple[Packet, int]:
    """Decode one packet at ``offset``; returns it with the offset past its end."""
    try:
        s, d, p, sp, dp, seq, created, emitted, n = _KEY_PKT.unpack_from(buf, offset)
    except struct.error as exc:
        raise DecodeError(f"truncated packet: {exc}") from None
    proto = _PROTOS.get(p)
    try:
        key = FlowKey(s, d, Proto(p) if proto is None else proto, sp, dp)
    except ValueError as exc:
        raise DecodeError(f"bad flow key: {exc}") from None
    offset += _KEY_PKT.size
    if n > MTU:
        raise DecodeError(f"packet payload length {n} exceeds MTU")
    payload = bytes(buf[offset : offset + n])
    if len(payload) != n:
        raise DecodeError("truncated packet payload")
    return Packet(key, seq, payload, created, None if emitted < 0 else emitted), offset + n


def encode_bundle(bundle: FlowStateBundle) -> bytes:
    name = bundle.chain_name.encode()
    parts = [_U16.pack(len(name)), name, _U16.pack(len(bundle.blobs))]
    for blob in bundle.blobs:
        parts.append(_U32.pack(len(blob)))
        parts.append(blob)
    return b"".join(parts)


def decode_bundle(buf, offset: int = 0) -> tuple[FlowStateBundle, int]:
    try:
        (n,) = _U16.unpack_from(buf, offset)
        offset += 2
        name = bytes(buf[offset : offset + n]).decode()
        offset += n
        (count,) = _U16.unpack_from(buf, offset)
        offset += 2
        blobs = []
        for _ in range(count):
            (size,) = _U32.unpack_from(buf, offset)
            offset += 4
            blob = bytes(buf[offset : offset + size])
            if len(blob) != size:
                raise DecodeError("truncated state blob")
            blobs.append(blob)
            offset += size
    except (struct.error, UnicodeDecodeError) as exc:
        raise DecodeError(f"malformed bundle: {exc}") from None
    return FlowStateBundle(name, tuple(blobs)), offset


def _encode_body(kind: MsgKind, body: Body) -> bytes:
    expected = _BODY_TYPE[kind]
    if expected is None:
        if body is not None:
            raise ValueError(f"{kind.name} carries no body, got {body!r}")
        return b""
    if not isinstance(body, expected):
        raise ValueError(f"{kind.name} body must be {expected.__name__}, got {type(body).__name__}")
    if isinstance(body, Status):
        return _U8.pack(1 if body.ok else 0)
    if isinstance(body, RouteTarget):
        return _U32.pack(body.dest)
    if isinstance(body, FlowStateBundle):
        return encode_bundle(body)
    if isinstance(body, Replication):
        return b"".join((_U32.pack(body.ingress), encode_packet(body.packet), encode_bundle(body.bundle)))
    if isinstance(body, RpcCall):
        return json.dumps({"m": body.method, "a": body.args}, sort_keys=True, separators=(",", ":")).encode()
    assert isinstance(body, RpcReply)
    return json.dumps(
        {"ok": body.ok, "r": body.result, "e": body.error}, sort_keys=True, separators=(",", ":")
    ).encode()


def _decode_body(kind: MsgKind, buf: bytes) -> Body:
    expected = _BODY_TYPE[kind]
    if expected is None:
        if buf:
            raise DecodeError(f"{kind.name} must have an empty body")
        return None
    try:
        if expected is Status:
            (flag,) = _U8.unpack(buf)
            return Status(bool(flag))
        if expected is RouteTarget:
            (dest,) = _U32.unpack(buf)
            return RouteTarget(dest)
        if expected is FlowStateBundle:
            bundle, end = decode_bundle(buf)
            if end != len(buf):
                raise DecodeError("trailing bytes after bundle")
            return bundle
        if expected is Replication:
            (ingress,) = _U32.unpack_from(buf, 0)
            pkt, off = decode_packet(buf, 4)
            bundle, end = decode_bundle(buf, off)
            if end != len(buf):
                raise DecodeError("trailing bytes after replication body")
            return Replication(pkt, bundle, ingress)
        obj = json.loads(buf.decode())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"malformed {kind.name} body: {exc}") from None
    if expected is RpcCall:
        return RpcCall(obj["m"], obj["a"])
    return RpcReply(obj["ok"], obj["r"], obj["e"])


def encode_message(msg: ActorMessage) -> bytes:
    """Encode ``msg`` into a self-delimiting byte string."""
    body = _encode_body(msg.kind, msg.body)
    if len(body) > MAX_BODY:
        raise EncodeTooLarge(f"{msg.kind.name} body is {len(body)} bytes, limit {MAX_BODY}")
    if msg.key is None:
        head = _HDR.pack(msg.kind, msg.src, msg.dst, msg.correlation_id, 0)
    else:
        head = _HDR.pack(msg.kind, msg.src, msg.dst, msg.correlation_id, 1) + encode_key(msg.key)
    return _LEN.pack(len(head) + len(body)) + head + body


def message_length(buf, offset: int = 0) -> Optional[int]:
    """Total encoded length of the message starting at ``offset``, or None if
    fewer than 4 bytes are available."""
    if len(buf) - offset < _LEN.size:
        return None
    return _LEN.size + _LEN.unpack_from(buf, offset)[0]


def decode_message(buf) -> ActorMessage:
    """Decode exactly one encoded message."""
    total = message_length(buf)
    if total is None or total != len(buf):
        raise DecodeError(f"length prefix {total} does not match buffer of {len(buf)} bytes")
    try:
        kind, src, dst, corr, has_key = _HDR.unpack_from(buf, _LEN.size)
        kind = MsgKind(kind)
    except (struct.error, ValueError) as exc:
        raise DecodeError(f"bad message header: {exc}") from None
    offset = _LEN.size + _HDR.size
    key = None
    if has_key not in (0, 1):
        raise DecodeError(f"bad key flag {has_key}")
    if has_key:
        try:
            key = decode_key(buf, offset)
        except (struct.error, ValueError) as exc:
            raise DecodeError(f"bad flow key: {exc}") from None
        offset += _KEY.size
    return ActorMessage(kind, src, dst, key, corr, _decode_body(kind, bytes(buf[offset:])))
