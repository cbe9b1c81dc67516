"""The NF runtime: per-flow actors, a liaison actor and a storage actor.

Every flow gets its own actor holding one state per NF of the service
chain.  The liaison role is played by :meth:`Runtime.deliver` (remote actor
messages) and the ``rpc_*`` methods (coordinator calls); the storage role by
``_shared``, one shared-state singleton per NF.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import asdict, dataclass
from typing import Any, Optional

from .actors import EXPIRED, ActorPool, FlowActor, LifecycleError, Mode, PoolExhausted
from .core import ActorMessage, ClusterConfig, FlowKey, FlowStateBundle, MsgKind, Packet, Role, WorkloadReport
from .nf.api import Action, ServiceChain
from .node import Host, Node
from .resilience import Phase, ResilienceMixin
from .sim import NS_PER_MS, NS_PER_S
from .transport import TransportConfig


@dataclass
class RuntimeConfig:
    pool_capacity: int = 1 << 20
    prealloc: int = 0
    expiry_timeout_ns: int = 5 * NS_PER_S
    timer_granularity_ns: int = NS_PER_MS
    step_deadline_ns: int = 50 * NS_PER_MS
    target_buffer: int = 1024
    input_capacity: int = 4096
    # None processes everything that is queued on each tick
    service_pps: Optional[float] = None
    # per-packet observer events for the harness oracles
    instrument: bool = False


@dataclass
class RuntimeCounters:
    nf_drops: int = 0
    protocol_drops: int = 0
    buffer_overflow: int = 0
    pool_exhausted: int = 0
    degraded_emits: int = 0
    replications_sent: int = 0
    replica_stores: int = 0
    replicas_expired: int = 0
    replicas_retired: int = 0
    migrations_started: int = 0
    migrations_done: int = 0
    migrations_aborted: int = 0
    targets_cleaned: int = 0
    recovered: int = 0
    recover_partial: int = 0
    recover_conflicts: int = 0
    expired: int = 0
    deallocs: int = 0
    stale_messages: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class Runtime(ResilienceMixin, Node):
    role = Role.Runtime

    def __init__(
        self,
        node_id: int,
        host: Host,
        chain: ServiceChain,
        config: Optional[RuntimeConfig] = None,
        transport_cfg: Optional[TransportConfig] = None,
    ) -> None:
        cfg = config or RuntimeConfig()
        super().__init__(node_id, host, transport_cfg, cfg.input_capacity, cfg.service_pps)
        self.rcfg = cfg
        self.chain = chain
        self._nfs = chain.nfs
        self._shared = [nf.allocate_shared_state() for nf in chain.nfs]
        self.flows: dict[FlowKey, FlowActor] = {}
        self.replicas: dict[FlowKey, FlowActor] = {}
        self.pool = ActorPool(cfg.pool_capacity, cfg.prealloc)
        self.counters = RuntimeCounters()
        self.replica_list: list[int] = []
        self._rr = 0
        self._busy = False
        self._timer_seq = 0
        self._expiry: list = []
        self._step_timers: list = []
        self._cleanup_timers: list = []
        self._deferred: deque = deque()
        self._recover_pending: dict[int, tuple] = {}
        self._poll_at = 0
        self._poll_processed = 0
        self._handlers = {
            MsgKind.MigrationCreateReq: self.on_migration_create_req,
            MsgKind.MigrationCreateResp: self.on_migration_create_resp,
            MsgKind.RouteUpdateResp: self.on_route_update_resp,
            MsgKind.StateTransferReq: self.on_state_transfer_req,
            MsgKind.StateTransferResp: self.on_state_transfer_resp,
            MsgKind.DestroyTarget: self.on_destroy_target,
            MsgKind.ReplicationData: self.on_replication_data,
            MsgKind.RecoverRouteResp: self.on_recover_route_resp,
        }

    @property
    def shared_states(self) -> list[Any]:
        return self._shared

    # -- state bundles ------------------------------------------------------

    def encode_bundle(self, actor: FlowActor) -> FlowStateBundle:
        return FlowStateBundle(self.chain.name, tuple(nf.encode_state(fs) for nf, fs in zip(self._nfs, actor.states)))

    def decode_bundle(self, bundle: FlowStateBundle) -> list[Any]:
        if bundle.chain_name != self.chain.name or len(bundle.blobs) != len(self._nfs):
            raise ValueError(f"bundle for chain {bundle.chain_name!r} does not fit {self.chain.name!r}")
        return [nf.decode_state(blob) for nf, blob in zip(self._nfs, bundle.blobs)]

    # -- dataplane ----------------------------------------------------------

    def on_dataplane_packet(self, pkt: Packet, src: int, idx: int) -> None:
        actor = self.flows.get(pkt.key)
        if actor is None:
            rep = self.replicas.get(pkt.key) if self.replicas else None
            if rep is not None and rep.recovering and self.promote(rep):
                actor = rep
            else:
                try:
                    actor = self.create_flow_actor(pkt.key)
                except PoolExhausted:
                    self.counters.pool_exhausted += 1
                    self.dropped_packets += 1
                    self.host.drop(self.id, "overload", pkt)
                    return
        mode = actor.mode
        if mode is Mode.Normal:
            self.process(actor, pkt, src)
        elif mode is Mode.MigrationSource:
            if actor.fsm.phase is Phase.WaitState:  # the states are already gone
                self._protocol_drop(pkt)
            else:
                self.process(actor, pkt, src)
        elif mode is Mode.MigrationTarget:
            actor.last_pkt_time = self.host.now()
            self.buffer_packet(actor, pkt, src)
        else:
            raise LifecycleError(f"dataplane packet for {mode.name} actor {pkt.key}")

    def create_flow_actor(self, key: FlowKey) -> FlowActor:
        if key in self.flows:
            raise LifecycleError(f"second actor for {key}")
        actor = self.pool.acquire(key, self.host.now())
        actor.states = [nf.allocate_new_fs() for nf in self._nfs]
        actor.replica_target = self.next_replica()
        self.flows[key] = actor
        self._arm_expiry(actor)
        return actor

    def process(self, actor: FlowActor, pkt: Packet, src: int) -> bool:
        """Run ``pkt`` through the chain; returns True if it was forwarded."""
        if self._busy:
            raise LifecycleError("chain traversal re-entered")
        self._busy = True
        actor.last_pkt_time = self.host.now()
        actor.ingress = src
        try:
            for nf, fs, ss in zip(self._nfs, actor.states, self._shared):
                verdict = nf.process_pkt(pkt, fs, ss)
                if verdict.action is Action.Drop:
                    self.counters.nf_drops += 1
                    self.host.drop(self.id, "nf", pkt)
                    if self.rcfg.instrument:
                        self._observe_processed(actor, pkt, False)
                    return False
                if verdict.mutated_payload is not None:
                    pkt.payload = verdict.mutated_payload
        finally:
            self._busy = False
        if self.rcfg.instrument:
            self._observe_processed(actor, pkt, True)
        if actor.replica_target is None:
            self.host.emit(self.id, pkt)
        else:
            self.replicate_after_process(actor, pkt)
        return True

    def _observe_processed(self, actor: FlowActor, pkt: Packet, forwarded: bool) -> None:
        self.host.observe(
            "processed",
            self.id,
            key=pkt.key,
            gen_seq=pkt.gen_seq,
            forwarded=forwarded,
            replicated=actor.replica_target is not None,
            bundle=self.encode_bundle(actor),
        )

    def _protocol_drop(self, pkt: Packet) -> None:
        self.counters.protocol_drops += 1
        self.host.drop(self.id, "protocol", pkt)

    # -- actor teardown -----------------------------------------------------

    def _deallocate(self, actor: FlowActor) -> None:
        if actor.deallocated:
            raise LifecycleError(f"deallocate_fs called twice for {actor.key}")
        if not actor.released:
            raise LifecycleError(f"deallocate_fs for {actor.key} before flow_expires/flow_migrate_out")
        for nf, fs in zip(self._nfs, actor.states):
            nf.deallocate_fs(fs)
        actor.deallocated = True
        self.counters.deallocs += 1

    def _remove(self, actor: FlowActor, reason: str) -> None:
        if self.flows.get(actor.key) is not actor:
            raise LifecycleError(f"{actor.key} is not in the flow table")
        actor.finalize(reason)
        del self.flows[actor.key]
        self.pool.release(actor)

    def _arm_expiry(self, actor: FlowActor) -> None:
        g = self.rcfg.timer_granularity_ns
        at = actor.last_pkt_time + self.rcfg.expiry_timeout_ns + 1
        self._push(self._expiry, -(-at // g) * g, actor, None)

    def expire_sweep(self, now: int) -> int:
        """Expire every actor idle for longer than the timeout; returns how many."""
        expired = 0
        timeout = self.rcfg.expiry_timeout_ns
        heap = self._expiry
        while heap and heap[0][0] <= now:
            _, _, actor, inc, _ = heapq.heappop(heap)
            if actor.incarnation != inc or actor.exit_reason is not None:
                continue
            if now - actor.last_pkt_time <= timeout or actor.mode in (Mode.MigrationSource, Mode.MigrationTarget):
                self._arm_expiry_after(actor, now)
                continue
            if actor.mode is Mode.Replica:
                if actor.recovering:
                    self._arm_expiry_after(actor, now)
                    continue
                del self.replicas[actor.key]
                self.counters.replicas_expired += 1
                self._retire(actor)
            else:
                self._expire(actor)
            expired += 1
        return expired

    def _arm_expiry_after(self, actor: FlowActor, now: int) -> None:
        if actor.last_pkt_time + self.rcfg.expiry_timeout_ns < now:
            # still busy with a protocol step; look again one tick later
            g = self.rcfg.timer_granularity_ns
            self._push(self._expiry, now + g, actor, None)
        else:
            self._arm_expiry(actor)

    def _expire(self, actor: FlowActor) -> None:
        for nf, fs, ss in zip(self._nfs, actor.states, self._shared):
            nf.flow_expires(fs, ss)
        actor.released = True
        self.host.observe("flow_final", self.id, key=actor.key, bundle=self.encode_bundle(actor))
        self._deallocate(actor)
        self.counters.expired += 1
        self._remove(actor, EXPIRED)

    # -- timers -------------------------------------------------------------

    def next_local_deadline(self) -> Optional[int]:
        heads = [h[0][0] for h in (self._expiry, self._step_timers, self._cleanup_timers) if h]
        return min(heads) if heads else None

    def local_timers(self, now: int) -> None:
        self.step_timers(now)
        self.expire_sweep(now)

    # -- liaison ------------------------------------------------------------

    def deliver(self, msg: ActorMessage, idx: int) -> None:
        handler = self._handlers.get(msg.kind)
        if handler is None:
            super().deliver(msg, idx)
        else:
            handler(msg, idx)

    def workload(self) -> WorkloadReport:
        now = self.host.now()
        elapsed = now - self._poll_at
        pps = (self.processed - self._poll_processed) * NS_PER_S / elapsed if elapsed > 0 else 0.0
        return WorkloadReport(self.dropped_packets, pps, self.active_flows())

    def active_flows(self) -> int:
        return sum(1 for a in self.flows.values() if a.mode is Mode.Normal)

    def rpc_poll_workload(self, req: ActorMessage) -> None:
        report = self.workload()
        self._poll_at = self.host.now()
        self._poll_processed = self.processed
        self.reply_rpc(req, True, {**report.to_dict(), "live_actors": len(self.flows)})

    def _live_runtimes(self) -> Optional[set[int]]:
        if self.cfg is None:
            return None
        return {m.runtime_id for m in self.cfg.runtimes()}

    def rpc_set_migration_target(self, req: ActorMessage, dst: int, n: int) -> None:
        live = self._live_runtimes()
        if dst == self.id:
            self.reply_rpc(req, False, error="migration target equals source")
            return
        if n < 0 or (live is not None and dst not in live):
            self.reply_rpc(req, False, error=f"invalid migration target {dst} or count {n}")
            return
        chosen = []
        if n:
            candidates = [a for a in self.flows.values() if a.mode is Mode.Normal and a.fsm is None]
            candidates.sort(key=lambda a: a.created)
            chosen = candidates[:n]
        for actor in chosen:
            self.migrate_flow(actor, dst)
        self.host.observe("migration_batch", self.id, target=dst, requested=n, started=len(chosen))
        self.reply_rpc(req, True, {"started": len(chosen)})

    def rpc_set_replicas(self, req: ActorMessage, replicas: list) -> None:
        ids = [int(r) for r in replicas]
        live = self._live_runtimes()
        if self.id in ids:
            self.reply_rpc(req, False, error="a runtime cannot replicate to itself")
            return
        if live is not None and not set(ids) <= live:
            self.reply_rpc(req, False, error=f"replica list {ids} names runtimes outside the cluster")
            return
        self.replica_list = ids
        self._rr = 0
        self.reply_rpc(req, True, {"replicas": ids})

    def on_cluster_cfg(self, cfg: ClusterConfig, gone: set[int]) -> None:
        for peer in gone:
            self._drop_replica_peer(peer)
        if gone:
            self.discard_orphan_targets(gone)

    # -- introspection for oracles -----------------------------------------

    def live_actor_count(self) -> int:
        return len(self.flows) + len(self.replicas)

    def kill(self) -> list[Packet]:
        lost = super().kill()
        for actor in self.flows.values():
            if actor.buffer:
                lost.extend(pkt for _, pkt in actor.buffer)
        return lost
