"""Small test fixtures: a bare simulated network and packet/message builders."""

from __future__ import annotations

import random
import struct
from typing import Any, Optional

from flowactor.core import (
    ActorMessage,
    ClusterConfig,
    FlowKey,
    FlowStateBundle,
    Member,
    MsgKind,
    Packet,
    Proto,
    Replication,
    Role,
    RouteTarget,
    RpcCall,
    RpcReply,
    Status,
)
from flowactor.node import Host, Node
from flowactor.sim import Fabric, LinkParams, Simulator


class Net(Host):
    """One host shared by every node on a simulated fabric."""

    def __init__(self, params: Optional[LinkParams] = None, seed: int = 0) -> None:
        self.sim = Simulator()
        self.fabric = Fabric(self.sim, params or LinkParams(), seed)
        self.nodes: dict[int, Node] = {}
        self.emitted: list[tuple[int, int, Packet]] = []
        self.drops: list[tuple[int, int, str, Packet]] = []
        self.events: list[tuple[str, int, dict]] = []
        self.epoch = 0

    def add(self, node: Node) -> Node:
        self.nodes[node.id] = node
        self.fabric.attach(node.id, node.receive)
        return node

    def now(self) -> int:
        return self.sim.now

    def send(self, src: int, dst: int, item: Any) -> bool:
        return self.fabric.send(src, dst, item)

    def schedule_tick(self, node: Node, at: Optional[int] = None) -> None:
        self.sim.at(self.sim.now if at is None else at, node.run_tick)

    def arm_timer(self, node: Node, at: int) -> None:
        self.sim.at(at, node.on_timer, at)

    def emit(self, node_id: int, pkt: Packet) -> None:
        self.emitted.append((self.sim.now, node_id, pkt))

    def drop(self, node_id: int, reason: str, pkt: Packet) -> None:
        self.drops.append((self.sim.now, node_id, reason, pkt))

    def observe(self, event: str, node_id: int, **fields: Any) -> None:
        self.events.append((event, node_id, fields))

    def run(self, until: Optional[int] = None) -> None:
        self.sim.run(until)

    def set_cfg(self, members: list[Member]) -> ClusterConfig:
        """Install a cluster view on every node directly, bypassing the RPC."""
        self.epoch += 1
        cfg = ClusterConfig(1, self.epoch, members)
        for node in self.nodes.values():
            old = {m.runtime_id for m in node.cfg.members} if node.cfg else set()
            node.cfg = ClusterConfig.from_dict(cfg.to_dict())
            node.on_cluster_cfg(node.cfg, old - {m.runtime_id for m in members})
        return cfg

    def kill(self, node_id: int) -> None:
        self.nodes[node_id].kill()
        self.fabric.detach(node_id)


def key(i: int, port: int = 80) -> FlowKey:
    return FlowKey(0x0A000000 + i, 0xC0A80001, Proto.TCP, 10000 + i % 50000, port)


def payload(seq: int, size: int = 64, body: bytes = b"") -> bytes:
    head = struct.pack("<Q", seq) + bytes(12)
    data = head + body
    return data + bytes(max(0, size - len(data)))


def pkt(k: FlowKey, seq: int, size: int = 64, body: bytes = b"", created: int = 0) -> Packet:
    return Packet(k, seq, payload(seq, size, body), created)


def runtime_member(rid: int, accepting: bool = True) -> Member:
    return Member(rid, Role.Runtime, f"sim:{rid}", f"sim:{rid}", accepting=accepting)


def vswitch_member(vid: int) -> Member:
    return Member(vid, Role.VirtualSwitch, f"sim:{vid}", f"sim:{vid}")


# -- random messages for codec tests -------------------------------------------


def random_key(rng: random.Random) -> FlowKey:
    return FlowKey(
        rng.getrandbits(32), rng.getrandbits(32), rng.choice(list(Proto)), rng.getrandbits(16), rng.getrandbits(16)
    )


def random_bundle(rng: random.Random) -> FlowStateBundle:
    name = "".join(rng.choice("abcdefgh->") for _ in range(rng.randrange(0, 24)))
    return FlowStateBundle(name, tuple(rng.randbytes(rng.randrange(0, 40)) for _ in range(rng.randrange(0, 5))))


def random_packet(rng: random.Random, max_payload: int = 1500) -> Packet:
    emitted = rng.choice([None, rng.getrandbits(62)])
    return Packet(random_key(rng), rng.getrandbits(64), rng.randbytes(rng.randrange(0, max_payload + 1)),
                  rng.getrandbits(62), emitted)


def _json_value(rng: random.Random, depth: int = 0) -> Any:
    choice = rng.randrange(6 if depth < 2 else 4)
    if choice == 0:
        return rng.randrange(-(2**40), 2**40)
    if choice == 1:
        return "".join(rng.choice("xyz_-0123") for _ in range(rng.randrange(8)))
    if choice == 2:
        return rng.choice([True, False, None])
    if choice == 3:
        return rng.randrange(10**6) / 8.0
    if choice == 4:
        return [_json_value(rng, depth + 1) for _ in range(rng.randrange(4))]
    return {f"k{i}": _json_value(rng, depth + 1) for i in range(rng.randrange(4))}


def random_message(rng: random.Random) -> ActorMessage:
    kind = rng.choice(list(MsgKind))
    body: Any = None
    if kind in (MsgKind.MigrationCreateResp, MsgKind.RouteUpdateResp, MsgKind.StateTransferResp,
                MsgKind.RecoverRouteResp):
        body = Status(rng.random() < 0.5)
    elif kind is MsgKind.RouteUpdateReq:
        body = RouteTarget(rng.getrandbits(32))
    elif kind is MsgKind.StateTransferReq:
        body = random_bundle(rng)
    elif kind is MsgKind.ReplicationData:
        body = Replication(random_packet(rng), random_bundle(rng), rng.getrandbits(32))
    elif kind is MsgKind.Rpc:
        body = RpcCall(rng.choice(["poll_workload", "recover", "set_replicas"]), _json_value(rng, 1) or {})
        if not isinstance(body.args, dict):
            body = RpcCall(body.method, {"v": body.args})
    elif kind is MsgKind.RpcResp:
        body = RpcReply(rng.random() < 0.5, _json_value(rng), rng.choice(["", "boom"]))
    k = random_key(rng) if rng.random() < 0.7 else None
    return ActorMessage(kind, rng.getrandbits(32), rng.getrandbits(32), k, rng.getrandbits(64), body)


# -- substring oracle for the IPS automaton --------------------------------------


def naive_matches(patterns: list[bytes], data: bytes) -> list[tuple[int, int]]:
    """Every (pattern index, end offset) occurrence, found by brute force."""
    out = []
    for i, p in enumerate(patterns):
        start = data.find(p)
        while start != -1:
            out.append((i, start + len(p) - 1))
            start = data.find(p, start + 1)
    return sorted(out)


def random_ac_case(rng: random.Random) -> tuple[list[bytes], bytes, list[int]]:
    """Patterns over a small alphabet (so matches are common), a stream and its chunk cut points."""
    alphabet = bytes(rng.sample(range(256), rng.randrange(1, 5)))
    pats = [bytes(rng.choice(alphabet) for _ in range(rng.randrange(1, 6))) for _ in range(rng.randrange(1, 8))]
    stream = bytes(rng.choice(alphabet) for _ in range(rng.randrange(0, 120)))
    cuts = sorted(rng.sample(range(len(stream) + 1), min(len(stream) + 1, rng.randrange(0, 6))))
    return pats, stream, cuts
