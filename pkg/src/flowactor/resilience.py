"""Flow migration, per-packet replication and recovery.

Migration is the three request/response exchange driven entirely by the
source flow actor:

1. ``MigrationCreateReq`` to the target runtime, which creates a target
   actor that buffers packets.
2. ``RouteUpdateReq`` to the flow's virtual switch.  The switch answers on
   the same link that carries the flow's packets to the source, so when the
   answer arrives every packet still routed to the source has arrived too.
3. ``StateTransferReq`` with the encoded states; the target installs them,
   drains its buffer and answers, and the source actor is destroyed.

Replication sends the post-processing states together with the packet to a
replica runtime, which stores the states and only then emits the packet.
On failure the replica actors of the dead runtime ask their virtual switch
to reroute the flow to themselves and take over.
"""

from __future__ import annotations

import enum
import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Optional

from .actors import DESTROYED, MIGRATED, FlowActor, LifecycleError, Mode, PoolExhausted
from .core import ActorMessage, FlowKey, FlowStateBundle, MsgKind, Replication, RouteTarget, Status

if TYPE_CHECKING:
    from .runtime import Runtime


class Phase(enum.IntEnum):
    Idle = 0
    WaitCreate = 1
    WaitRoute = 2
    WaitState = 3
    Done = 4
    Aborted = 5


_FORWARD = {
    Phase.Idle: Phase.WaitCreate,
    Phase.WaitCreate: Phase.WaitRoute,
    Phase.WaitRoute: Phase.WaitState,
    Phase.WaitState: Phase.Done,
}


@dataclass
class MigrationFsm:
    target: int
    correlation_id: int
    vswitch: int
    started_at: int = 0
    phase: Phase = Phase.Idle
    # None while no response is awaited (the source is draining its input)
    deadline: Optional[int] = None
    route_requested: bool = False
    # arrival index of the step-2 response while older packets drain
    horizon: Optional[int] = None

    def advance(self, phase: Phase) -> None:
        if phase is Phase.Aborted:
            if self.phase in (Phase.Done, Phase.Aborted):
                raise LifecycleError(f"abort from terminal phase {self.phase.name}")
        elif _FORWARD.get(self.phase) is not phase:
            raise LifecycleError(f"illegal migration transition {self.phase.name} -> {phase.name}")
        self.phase = phase


@dataclass
class ReplicaRecord:
    key: FlowKey
    states: FlowStateBundle
    source: int
    last_update: int
    # harness bookkeeping: generator sequence of the last replicated packet
    last_gen_seq: int = -1
    ingress: int = 0


@dataclass
class RecoveryJob:
    request: ActorMessage
    failed: int
    pending: set = field(default_factory=set)
    keys: frozenset = frozenset()
    recovered: int = 0
    partial: bool = False


class ResilienceMixin:
    """Protocol handlers of :class:`~flowactor.runtime.Runtime`."""

    # -- migration, source side ---------------------------------------------

    def migrate_flow(self: Runtime, actor: FlowActor, target: int) -> MigrationFsm:
        if actor.mode is not Mode.Normal or actor.fsm is not None:
            raise LifecycleError(f"cannot migrate {actor.key} in mode {actor.mode.name}")
        fsm = MigrationFsm(target, self.new_correlation(), actor.ingress, started_at=self.host.now())
        actor.fsm = fsm
        actor.mode = Mode.MigrationSource
        fsm.advance(Phase.WaitCreate)
        self._arm_step(actor)
        self.counters.migrations_started += 1
        self.send_msg(MsgKind.MigrationCreateReq, target, actor.key, fsm.correlation_id)
        return fsm

    def _arm_step(self: Runtime, actor: FlowActor) -> None:
        fsm = actor.fsm
        fsm.deadline = self.host.now() + self.rcfg.step_deadline_ns
        self._push(self._step_timers, fsm.deadline, actor, fsm.correlation_id)

    def _fsm_actor(self: Runtime, msg: ActorMessage, phase: Phase) -> Optional[FlowActor]:
        actor = self.flows.get(msg.key)
        if actor is None or actor.fsm is None:
            self.counters.stale_messages += 1
            return None
        fsm = actor.fsm
        if fsm.correlation_id != msg.correlation_id or fsm.phase is not phase or msg.src != (
            fsm.vswitch if phase is Phase.WaitRoute else fsm.target
        ):
            self.counters.stale_messages += 1
            return None
        return actor

    def on_migration_create_resp(self: Runtime, msg: ActorMessage, idx: int) -> None:
        actor = self._fsm_actor(msg, Phase.WaitCreate)
        if actor is None:
            return
        if not msg.body.ok:
            self.abort_migration(actor, "target refused")
            return
        fsm = actor.fsm
        fsm.advance(Phase.WaitRoute)
        fsm.route_requested = True
        self._arm_step(actor)
        self.send_msg(MsgKind.RouteUpdateReq, fsm.vswitch, actor.key, fsm.correlation_id, RouteTarget(fsm.target))

    def on_route_update_resp(self: Runtime, msg: ActorMessage, idx: int) -> None:
        actor = self._fsm_actor(msg, Phase.WaitRoute)
        if actor is None:
            return
        if not msg.body.ok:
            self.abort_migration(actor, "route not found")
            return
        fsm = actor.fsm
        fsm.deadline = None
        port = self.input_port
        if port and port[0][0] < idx:
            # packets that reached us before the response are still queued
            fsm.horizon = idx
            self._deferred.append((idx, actor, fsm.correlation_id))
        else:
            self._send_state(actor)

    def after_dataplane(self: Runtime) -> None:
        deferred = self._deferred
        if not deferred:
            return
        port = self.input_port
        head = port[0][0] if port else None
        while deferred and (head is None or deferred[0][0] < head):
            _, actor, corr = deferred.popleft()
            fsm = actor.fsm
            if fsm is not None and fsm.correlation_id == corr and fsm.phase is Phase.WaitRoute:
                self._send_state(actor)

    def _send_state(self: Runtime, actor: FlowActor) -> None:
        fsm = actor.fsm
        fsm.advance(Phase.WaitState)
        fsm.horizon = None
        self._arm_step(actor)
        bundle = self.encode_bundle(actor)
        if actor.replica_target is not None:
            # replication stops here; correlation 0 retires the old replica
            self.send_msg(MsgKind.DestroyTarget, actor.replica_target, actor.key, 0)
            actor.replica_target = None
        self.send_msg(MsgKind.StateTransferReq, fsm.target, actor.key, fsm.correlation_id, bundle)

    def on_state_transfer_resp(self: Runtime, msg: ActorMessage, idx: int) -> None:
        actor = self._fsm_actor(msg, Phase.WaitState)
        if actor is None:
            return
        if not msg.body.ok:
            self.abort_migration(actor, "state refused")
            return
        fsm = actor.fsm
        for nf, fs, ss in zip(self._nfs, actor.states, self._shared):
            nf.flow_migrate_out(fs, ss)
        actor.released = True
        self._deallocate(actor)
        fsm.advance(Phase.Done)
        now = self.host.now()
        self.counters.migrations_done += 1
        self.host.observe(
            "migration_done", self.id, key=actor.key, target=fsm.target, started_at=fsm.started_at, finished_at=now
        )
        self._remove(actor, MIGRATED)

    def abort_migration(self: Runtime, actor: FlowActor, reason: str) -> None:
        fsm = actor.fsm
        phase = fsm.phase
        fsm.advance(Phase.Aborted)
        fsm.deadline = None
        actor.fsm = None
        actor.mode = Mode.Normal
        self.counters.migrations_aborted += 1
        self.send_msg(MsgKind.DestroyTarget, fsm.target, actor.key, fsm.correlation_id)
        if fsm.route_requested:
            self.send_msg(MsgKind.RouteUpdateReq, fsm.vswitch, actor.key, fsm.correlation_id, RouteTarget(self.id))
        if actor.replica_target is None:
            actor.replica_target = self.next_replica()
        self.host.observe("migration_aborted", self.id, key=actor.key, target=fsm.target, phase=phase.name, reason=reason)

    # -- migration, target side ---------------------------------------------

    def on_migration_create_req(self: Runtime, msg: ActorMessage, idx: int) -> None:
        key = msg.key
        if key in self.flows:
            self.send_msg(MsgKind.MigrationCreateResp, msg.src, key, msg.correlation_id, Status(False))
            return
        try:
            actor = self.pool.acquire(key, self.host.now())
        except PoolExhausted:
            self.counters.pool_exhausted += 1
            self.send_msg(MsgKind.MigrationCreateResp, msg.src, key, msg.correlation_id, Status(False))
            return
        actor.mode = Mode.MigrationTarget
        actor.buffer = deque()
        actor.mig_source = msg.src
        actor.mig_corr = msg.correlation_id
        self.flows[key] = actor
        self._push(self._cleanup_timers, self.host.now() + 3 * self.rcfg.step_deadline_ns, actor, msg.correlation_id)
        self.send_msg(MsgKind.MigrationCreateResp, msg.src, key, msg.correlation_id, Status(True))

    def buffer_packet(self: Runtime, actor: FlowActor, pkt, src: int) -> None:
        buf = actor.buffer
        if len(buf) >= self.rcfg.target_buffer:
            _, old = buf.popleft()
            self.counters.buffer_overflow += 1
            self._protocol_drop(old)
        buf.append((src, pkt))

    def on_state_transfer_req(self: Runtime, msg: ActorMessage, idx: int) -> None:
        actor = self.flows.get(msg.key)
        if (
            actor is None
            or actor.mode is not Mode.MigrationTarget
            or actor.mig_source != msg.src
            or actor.mig_corr != msg.correlation_id
        ):
            self.counters.stale_messages += 1
            self.send_msg(MsgKind.StateTransferResp, msg.src, msg.key, msg.correlation_id, Status(False))
            return
        states = self.decode_bundle(msg.body)
        for nf, fs, ss in zip(self._nfs, states, self._shared):
            nf.flow_migrate_in(fs, ss)
        now = self.host.now()
        actor.states = states
        actor.mode = Mode.Normal
        actor.installed_at = now
        actor.last_pkt_time = now
        actor.replica_target = self.next_replica()
        buffered = actor.buffer
        actor.buffer = None
        self._arm_expiry(actor)
        self.send_msg(MsgKind.StateTransferResp, msg.src, msg.key, msg.correlation_id, Status(True))
        for src, pkt in buffered:
            self.process(actor, pkt, src)

    def on_destroy_target(self: Runtime, msg: ActorMessage, idx: int) -> None:
        key = msg.key
        if msg.correlation_id == 0:
            rep = self.replicas.get(key)
            if rep is not None and rep.replica.source == msg.src and not rep.recovering:
                del self.replicas[key]
                self.counters.replicas_retired += 1
                self._retire(rep)
            return
        actor = self.flows.get(key)
        if actor is None or actor.mig_source != msg.src or actor.mig_corr != msg.correlation_id:
            self.counters.stale_messages += 1
            return
        if actor.mode is Mode.MigrationTarget:
            self._discard_target(actor)
        elif actor.mode is Mode.Normal and actor.fsm is None:
            # states were installed but the source gave up: hand the resources back
            for nf, fs, ss in zip(self._nfs, actor.states, self._shared):
                nf.flow_migrate_out(fs, ss)
            actor.released = True
            self._deallocate(actor)
            self._remove(actor, DESTROYED)

    def _discard_target(self: Runtime, actor: FlowActor) -> None:
        for _, pkt in actor.buffer:
            self._protocol_drop(pkt)
        actor.buffer.clear()
        self._remove(actor, DESTROYED)

    # -- replication --------------------------------------------------------

    def next_replica(self: Runtime) -> Optional[int]:
        replicas = self.replica_list
        if not replicas:
            return None
        target = replicas[self._rr % len(replicas)]
        self._rr += 1
        return target

    def replicate_after_process(self: Runtime, actor: FlowActor, pkt) -> None:
        target = actor.replica_target
        if self.transport.is_broken(target):
            self._emit_degraded(pkt)
            return
        self.counters.replications_sent += 1
        body = Replication(pkt, self.encode_bundle(actor), actor.ingress)
        self.send_msg(MsgKind.ReplicationData, target, actor.key, 0, body)

    def _emit_degraded(self: Runtime, pkt) -> None:
        self.counters.degraded_emits += 1
        self.host.observe("degraded_emit", self.id, key=pkt.key, gen_seq=pkt.gen_seq)
        self.host.emit(self.id, pkt)

    def on_replication_data(self: Runtime, msg: ActorMessage, idx: int) -> None:
        body: Replication = msg.body
        key = msg.key
        pkt = body.packet
        self.decode_bundle(body.bundle)  # records must always be decodable
        now = self.host.now()
        rep = self.replicas.get(key)
        if rep is not None and (rep.replica.source != msg.src or rep.recovering):
            del self.replicas[key]
            self._retire(rep)
            rep = None
        if rep is None:
            try:
                rep = self.pool.acquire(key, now)
            except PoolExhausted:
                self.counters.pool_exhausted += 1
                self.dropped_packets += 1
                self.host.drop(self.id, "overload", pkt)
                return
            rep.mode = Mode.Replica
            rep.replica = ReplicaRecord(key, body.bundle, msg.src, now, pkt.gen_seq, body.ingress)
            self.replicas[key] = rep
            self._arm_expiry(rep)
        else:
            record = rep.replica
            record.states = body.bundle
            record.last_update = now
            record.last_gen_seq = pkt.gen_seq
            record.ingress = body.ingress
        rep.last_pkt_time = now
        self.counters.replica_stores += 1
        if self.rcfg.instrument:
            self.host.observe("replica_store", self.id, key=key, gen_seq=pkt.gen_seq, source=msg.src)
        # output commit: the states are stored, the packet may leave
        self.host.emit(self.id, pkt)

    def _retire(self: Runtime, rep: FlowActor) -> None:
        rep.finalize(DESTROYED)
        self.pool.release(rep)

    # -- recovery -----------------------------------------------------------

    def rpc_recover(self: Runtime, req: ActorMessage, failed: int) -> None:
        keys = [k for k, rep in self.replicas.items() if rep.replica.source == failed and not rep.recovering]
        if not keys:
            self.reply_rpc(req, True, {"recovered": 0, "replicated": 0, "partial": False})
            return
        job = RecoveryJob(req, failed, set(keys), frozenset(keys))
        self.host.observe("recovery_started", self.id, failed=failed, flows=len(keys))
        for key in keys:
            rep = self.replicas[key]
            rep.recovering = job
            corr = self.new_correlation()
            self._recover_pending[corr] = (job, key)
            self.send_msg(MsgKind.RecoverRouteReq, rep.replica.ingress, key, corr)

    def on_recover_route_resp(self: Runtime, msg: ActorMessage, idx: int) -> None:
        entry = self._recover_pending.pop(msg.correlation_id, None)
        if entry is None:
            self.counters.stale_messages += 1
            return
        job, key = entry
        rep = self.replicas.get(key)
        if rep is not None and rep.recovering:
            self.promote(rep)
        self._settle(job, key)

    def promote(self: Runtime, rep: FlowActor) -> bool:
        """Turn a recovering replica into the flow's live actor."""
        key = rep.key
        del self.replicas[key]
        record: ReplicaRecord = rep.replica
        job = rep.recovering
        if key in self.flows:
            self.counters.recover_conflicts += 1
            self._retire(rep)
            return False
        states = self.decode_bundle(record.states)
        for nf, fs, ss in zip(self._nfs, states, self._shared):
            nf.flow_recover(fs, ss)
        now = self.host.now()
        rep.states = states
        rep.mode = Mode.Normal
        rep.recovering = False
        rep.ingress = record.ingress
        rep.installed_at = now
        rep.last_pkt_time = now
        rep.replica = None
        rep.replica_target = self.next_replica()
        self.flows[key] = rep
        self.counters.recovered += 1
        job.recovered += 1
        self.host.observe(
            "recovered", self.id, key=key, source=record.source, gen_seq=record.last_gen_seq, bundle=record.states
        )
        return True

    def _settle(self: Runtime, job: RecoveryJob, key: FlowKey) -> None:
        job.pending.discard(key)
        if job.pending:
            return
        if job.partial:
            self.counters.recover_partial += 1
        self.host.observe("recovery_done", self.id, failed=job.failed, recovered=job.recovered, partial=job.partial)
        self.reply_rpc(
            job.request, True, {"recovered": job.recovered, "replicated": len(job.keys), "partial": job.partial}
        )

    # -- failures of peers --------------------------------------------------

    def on_unreachable(self: Runtime, peer: int, msgs: list[ActorMessage]) -> None:
        for msg in msgs:
            kind = msg.kind
            if kind is MsgKind.ReplicationData:
                self._emit_degraded(msg.body.packet)
            elif kind in (MsgKind.MigrationCreateReq, MsgKind.RouteUpdateReq, MsgKind.StateTransferReq):
                actor = self.flows.get(msg.key)
                if actor is not None and actor.fsm is not None and actor.fsm.correlation_id == msg.correlation_id:
                    self.abort_migration(actor, f"peer {peer} unreachable")
            elif kind is MsgKind.RecoverRouteReq:
                entry = self._recover_pending.pop(msg.correlation_id, None)
                if entry is not None:
                    job, key = entry
                    rep = self.replicas.get(key)
                    if rep is not None:
                        rep.recovering = False
                    job.partial = True
                    self._settle(job, key)
        self._drop_replica_peer(peer)

    def _drop_replica_peer(self: Runtime, peer: int) -> None:
        if peer in self.replica_list:
            self.replica_list = [r for r in self.replica_list if r != peer]
        for actor in self.flows.values():
            if actor.replica_target == peer:
                actor.replica_target = self.next_replica()

    # -- timers -------------------------------------------------------------

    def _push(self: Runtime, heap: list, at: int, actor: FlowActor, tag: Any) -> None:
        self._timer_seq += 1
        heapq.heappush(heap, (at, self._timer_seq, actor, actor.incarnation, tag))

    def step_timers(self: Runtime, now: int) -> None:
        heap = self._step_timers
        while heap and heap[0][0] <= now:
            at, _, actor, inc, corr = heapq.heappop(heap)
            fsm = actor.fsm
            if actor.incarnation == inc and fsm is not None and fsm.correlation_id == corr and fsm.deadline == at:
                self.abort_migration(actor, "timeout")
        heap = self._cleanup_timers
        while heap and heap[0][0] <= now:
            _, _, actor, inc, corr = heapq.heappop(heap)
            if actor.incarnation != inc or actor.mode is not Mode.MigrationTarget or actor.mig_corr != corr:
                continue
            if self._source_alive(actor.mig_source):
                # the source may be draining a long input queue before step 3
                self._push(heap, now + 3 * self.rcfg.step_deadline_ns, actor, corr)
            else:
                self.counters.targets_cleaned += 1
                self._discard_target(actor)

    def _source_alive(self: Runtime, peer: int) -> bool:
        if self.transport.is_broken(peer):
            return False
        return self.cfg is None or self.cfg.member(peer) is not None

    def discard_orphan_targets(self: Runtime, gone: set[int]) -> None:
        orphans = [a for a in self.flows.values() if a.mode is Mode.MigrationTarget and a.mig_source in gone]
        for actor in orphans:
            self.counters.targets_cleaned += 1
            self._discard_target(actor)
