"""The virtual switch: flow dispatch to runtimes and route rewriting.

The switch is a runtime whose "chain" is a forwarding decision.  Each flow
entry saves the destination runtime id; migration and recovery only ever
rewrite that id.  Route-update responses go out through the same link as
the dataplane packets to the old destination, and the dataplane graph runs
before the transport graph on every tick, so a response always trails the
last packet sent to the old destination.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass
from typing import Optional

from .core import (
    ActorMessage,
    ClusterConfig,
    FlowKey,
    FlowStateBundle,
    MsgKind,
    Packet,
    Replication,
    Role,
    Status,
)
from .node import Host, Node
from .sim import NS_PER_MS, NS_PER_S
from .transport import TransportConfig

_DEST = struct.Struct("<I")
ENTRY_CHAIN = "vswitch"


@dataclass(slots=True)
class VsFlowEntry:
    key: FlowKey
    dest: int
    last_seen: int = 0


@dataclass
class VsCounters:
    forwarded: int = 0
    no_route: int = 0
    new_flows: int = 0
    route_updates: int = 0
    route_not_found: int = 0
    recover_updates: int = 0
    recover_created: int = 0
    expired: int = 0
    entries_replicated: int = 0
    standby_entries: int = 0


class VirtualSwitch(Node):
    role = Role.VirtualSwitch

    def __init__(
        self,
        node_id: int,
        host: Host,
        transport_cfg: Optional[TransportConfig] = None,
        expiry_timeout_ns: int = 5 * NS_PER_S,
        timer_granularity_ns: int = NS_PER_MS,
        input_capacity: int = 1 << 16,
    ) -> None:
        super().__init__(node_id, host, transport_cfg, input_capacity)
        self.entries: dict[FlowKey, VsFlowEntry] = {}
        self.expiry_timeout_ns = expiry_timeout_ns
        self.granularity = timer_granularity_ns
        self._expiry: list = []
        self._seq = 0
        # load seen at the last cfg refresh plus local changes since then
        self._base: dict[int, int] = {}
        self._delta: dict[int, int] = {}
        self._candidates: list[int] = []
        self.replica_vs: Optional[int] = None
        # entries replicated to us by other switches, by source switch
        self.standby: dict[int, dict[FlowKey, int]] = {}
        self.counters = VsCounters()

    # -- dispatch -----------------------------------------------------------

    def load(self, runtime_id: int) -> int:
        return self._base.get(runtime_id, 0) + self._delta.get(runtime_id, 0)

    def _move(self, old: Optional[int], new: int) -> None:
        if old is not None:
            self._delta[old] = self._delta.get(old, 0) - 1
        self._delta[new] = self._delta.get(new, 0) + 1

    def on_cluster_cfg(self, cfg: ClusterConfig, gone: set[int]) -> None:
        self._base = {m.runtime_id: m.workload.active_flows for m in cfg.runtimes()}
        self._delta = {}
        self._candidates = sorted(m.runtime_id for m in cfg.runtimes() if m.accepting)
        if self.replica_vs in gone:
            self.replica_vs = None

    def vs_on_new_flow(self, pkt: Packet) -> Optional[VsFlowEntry]:
        if not self._candidates:
            return None
        # lowest id wins ties: candidates are sorted and min keeps the first
        dest = min(self._candidates, key=self.load)
        entry = VsFlowEntry(pkt.key, dest, self.host.now())
        self.entries[pkt.key] = entry
        self.counters.new_flows += 1
        self._move(None, dest)
        self._arm_expiry(entry)
        self._replicate(entry)
        return entry

    def on_dataplane_packet(self, pkt: Packet, src: int, idx: int) -> None:
        entry = self.entries.get(pkt.key)
        if entry is None:
            entry = self.vs_on_new_flow(pkt)
            if entry is None:
                self.counters.no_route += 1
                self.host.drop(self.id, "no_route", pkt)
                return
        self.vs_forward(entry, pkt)

    def vs_forward(self, entry: VsFlowEntry, pkt: Packet) -> None:
        entry.last_seen = self.host.now()
        self.counters.forwarded += 1
        self.host.send(self.id, entry.dest, pkt)

    # -- route changes ------------------------------------------------------

    def deliver(self, msg: ActorMessage, idx: int) -> None:
        kind = msg.kind
        if kind is MsgKind.RouteUpdateReq:
            self.vs_handle_route_update(msg)
        elif kind is MsgKind.RecoverRouteReq:
            self.vs_handle_recover_route(msg)
        elif kind is MsgKind.ReplicationData:
            self._store_standby(msg)
        else:
            super().deliver(msg, idx)

    def vs_handle_route_update(self, req: ActorMessage) -> None:
        entry = self.entries.get(req.key)
        if entry is None:
            self.counters.route_not_found += 1
            self.send_msg(MsgKind.RouteUpdateResp, req.src, req.key, req.correlation_id, Status(False))
            return
        new = req.body.dest
        if entry.dest != new:
            self._move(entry.dest, new)
            entry.dest = new
            self._replicate(entry)
        self.counters.route_updates += 1
        # the requester is the old destination: this answer queues behind its packets
        self.send_msg(MsgKind.RouteUpdateResp, req.src, req.key, req.correlation_id, Status(True))

    def vs_handle_recover_route(self, req: ActorMessage) -> None:
        entry = self.entries.get(req.key)
        found = entry is not None
        if entry is None:
            # the flow may have started after the failure
            entry = VsFlowEntry(req.key, req.src, self.host.now())
            self.entries[req.key] = entry
            self._move(None, req.src)
            self._arm_expiry(entry)
            self.counters.recover_created += 1
        elif entry.dest != req.src:
            self._move(entry.dest, req.src)
            entry.dest = req.src
        if found:
            self.counters.recover_updates += 1
        self._replicate(entry)
        self.send_msg(MsgKind.RecoverRouteResp, req.src, req.key, req.correlation_id, Status(found))

    # -- entry replication between switches ---------------------------------

    def rpc_set_replicas(self, req: ActorMessage, replicas: list) -> None:
        ids = [int(r) for r in replicas]
        if self.id in ids or len(ids) > 1:
            self.reply_rpc(req, False, error="a virtual switch takes at most one other switch as replica")
            return
        self.replica_vs = ids[0] if ids else None
        self.reply_rpc(req, True, {"replicas": ids})

    def _replicate(self, entry: VsFlowEntry) -> None:
        if self.replica_vs is None or self.transport.is_broken(self.replica_vs):
            return
        # entries carry no packet of their own; an empty marker stands in
        marker = Packet(entry.key, 0, b"")
        bundle = FlowStateBundle(ENTRY_CHAIN, (_DEST.pack(entry.dest),))
        self.counters.entries_replicated += 1
        self.send_msg(MsgKind.ReplicationData, self.replica_vs, entry.key, 0, Replication(marker, bundle, self.id))

    def _store_standby(self, msg: ActorMessage) -> None:
        body: Replication = msg.body
        if body.bundle.chain_name != ENTRY_CHAIN:
            self.unknown_messages += 1
            return
        (dest,) = _DEST.unpack(body.bundle.blobs[0])
        self.standby.setdefault(msg.src, {})[msg.key] = dest
        self.counters.standby_entries += 1

    def rpc_recover(self, req: ActorMessage, failed: int) -> None:
        """Take over the flow entries of a failed switch."""
        taken = self.standby.pop(failed, {})
        now = self.host.now()
        for key, dest in taken.items():
            if key in self.entries:
                continue
            entry = VsFlowEntry(key, dest, now)
            self.entries[key] = entry
            self._move(None, dest)
            self._arm_expiry(entry)
        self.reply_rpc(req, True, {"recovered": len(taken), "replicated": len(taken), "partial": False})

    # -- expiry -------------------------------------------------------------

    def _arm_expiry(self, entry: VsFlowEntry) -> None:
        g = self.granularity
        at = -(-(entry.last_seen + self.expiry_timeout_ns + 1) // g) * g
        self._seq += 1
        heapq.heappush(self._expiry, (at, self._seq, entry))

    def next_local_deadline(self) -> Optional[int]:
        return self._expiry[0][0] if self._expiry else None

    def local_timers(self, now: int) -> None:
        heap = self._expiry
        while heap and heap[0][0] <= now:
            _, _, entry = heapq.heappop(heap)
            if self.entries.get(entry.key) is not entry:
                continue
            if now - entry.last_seen > self.expiry_timeout_ns:
                del self.entries[entry.key]
                self._delta[entry.dest] = self._delta.get(entry.dest, 0) - 1
                self.counters.expired += 1
            else:
                self._arm_expiry(entry)

    def assignment_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for entry in self.entries.values():
            counts[entry.dest] = counts.get(entry.dest, 0) + 1
        return counts
