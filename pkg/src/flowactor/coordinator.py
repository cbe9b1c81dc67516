"""Cluster coordinator: membership, failure detection, scaling, decision log.

The coordinator talks to runtimes only through RPC messages on the reliable
transport.  It starts migrations and recoveries but takes no part in them:
one RPC per runtime starts an episode, and the per-flow protocol runs among
the runtimes.

Every RPC and every configuration epoch is appended to the log before it is
acted upon; :meth:`CoordinatorState.replay` rebuilds the cluster view from
such a log.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Protocol

from .core import COORDINATOR_ID, ActorMessage, ClusterConfig, Member, MsgKind, Role, RpcCall, WorkloadReport
from .node import Host, Node
from .sim import NS_PER_MS, NS_PER_S
from .transport import TransportConfig

log = logging.getLogger(__name__)


@dataclass
class CoordinatorConfig:
    heartbeat_period_ns: int = 100 * NS_PER_MS
    miss_threshold: int = 3
    poll_period_ns: int = NS_PER_S
    drop_threshold: int = 100
    batch: int = 500
    low_watermark: float = 0.10
    idle_polls: int = 3
    scaling: bool = True
    heartbeats: bool = True
    polling: bool = True
    # give up on a scaling job after this many batches beyond the estimate
    batch_slack: int = 10


@dataclass
class HeartbeatStatus:
    last_ack: int = 0
    misses: int = 0
    outstanding: Optional[int] = None
    sent_at: int = 0


class CoordinatorLog:
    """Append-only newline-delimited JSON records, mirrored in memory."""

    def __init__(self, path: Optional[Path] = None) -> None:
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        self._fh = open(self.path, "a", encoding="utf-8") if self.path else None

    def append(self, record: dict) -> dict:
        record = {"seq": len(self.records), **record}
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()
        return record

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    @staticmethod
    def read(path: Path) -> list[dict]:
        records = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: bad log record: {exc}") from None
        return records


@dataclass
class CoordinatorState:
    clusters: dict[int, ClusterConfig] = field(default_factory=dict)
    heartbeat_status: dict[int, HeartbeatStatus] = field(default_factory=dict)
    replica_plan: dict[int, list[int]] = field(default_factory=dict)

    def apply(self, record: dict) -> None:
        kind = record.get("type")
        if kind == "epoch":
            cfg = ClusterConfig.from_dict(record["cfg"])
            old = self.clusters.get(cfg.cluster_id)
            if old is not None and cfg.epoch <= old.epoch:
                raise ValueError(f"epoch went from {old.epoch} to {cfg.epoch} in cluster {cfg.cluster_id}")
            self.clusters[cfg.cluster_id] = cfg
        elif kind == "replica_plan":
            rt = int(record["runtime"])
            if record["replicas"] is None:
                self.replica_plan.pop(rt, None)
            else:
                self.replica_plan[rt] = [int(r) for r in record["replicas"]]

    @classmethod
    def replay(cls, records: Iterable[dict]) -> CoordinatorState:
        state = cls()
        for record in records:
            state.apply(record)
        return state

    def epoch(self, cluster_id: int) -> int:
        cfg = self.clusters.get(cluster_id)
        return cfg.epoch if cfg else 0

    def snapshot(self) -> dict:
        return {
            "clusters": {cid: cfg.to_dict() for cid, cfg in sorted(self.clusters.items())},
            "replica_plan": {rt: list(ids) for rt, ids in sorted(self.replica_plan.items())},
        }


class Launcher(Protocol):
    """What the coordinator needs from whoever owns the machines."""

    def boot(self, role: Role, accepting: bool = True) -> Optional[Member]: ...

    def shutdown(self, runtime_id: int) -> None: ...

    def vswitch_failed(self, failed: int, replacement: Optional[int]) -> None: ...


@dataclass
class _PendingRpc:
    dst: int
    method: str
    callback: Optional[Callable[[Optional[Any]], None]]
    deadline: Optional[int]


@dataclass
class ScaleJob:
    kind: str  # "out" or "in"
    source: int
    targets: list[int]
    initial: int
    goal: int
    batches: int = 0
    max_batches: int = 0
    waiting: bool = False


class Coordinator(Node):
    role = Role.Runtime

    def __init__(
        self,
        host: Host,
        launcher: Launcher,
        config: Optional[CoordinatorConfig] = None,
        transport_cfg: Optional[TransportConfig] = None,
        log_path: Optional[Path] = None,
        cluster_id: int = 1,
    ) -> None:
        super().__init__(COORDINATOR_ID, host, transport_cfg)
        self.ccfg = config or CoordinatorConfig()
        self.launcher = launcher
        self.cluster_id = cluster_id
        self.state = CoordinatorState()
        self.log = CoordinatorLog(log_path)
        self._pending: dict[int, _PendingRpc] = {}
        self.reports: dict[int, WorkloadReport] = {}
        self.stale: set[int] = set()
        self._next_hb: Optional[int] = None
        self._next_poll: Optional[int] = None
        self._polling = False
        self._last_drops: dict[int, int] = {}
        self._peak_pps: dict[int, float] = {}
        self._idle: dict[int, int] = {}
        self.job: Optional[ScaleJob] = None
        self._later: list[tuple[int, Callable[[], None]]] = []
        self.sent: list[tuple[int, MsgKind, int]] = []
        self.failures: list[dict] = []
        self.recoveries: list[dict] = []
        self.actions: list[dict] = []

    # -- plumbing -----------------------------------------------------------

    @property
    def cfg_current(self) -> Optional[ClusterConfig]:
        return self.state.clusters.get(self.cluster_id)

    def send_msg(self, kind, dst, key=None, corr=0, body=None):
        self.sent.append((self.host.now(), kind, dst))
        return super().send_msg(kind, dst, key, corr, body)

    def messages_between(self, start: int, end: int) -> int:
        return sum(1 for t, _, _ in self.sent if start <= t <= end)

    def call(
        self,
        dst: int,
        method: str,
        args: Optional[dict] = None,
        callback: Optional[Callable[[Optional[Any]], None]] = None,
        timeout_ns: Optional[int] = None,
    ) -> int:
        args = args or {}
        corr = self.new_correlation()
        # logged before anything is assumed about its effect
        self.log.append({"t": self.host.now(), "type": "rpc", "dst": dst, "method": method, "args": args, "corr": corr})
        deadline = None if timeout_ns is None else self.host.now() + timeout_ns
        self._pending[corr] = _PendingRpc(dst, method, callback, deadline)
        self.send_msg(MsgKind.Rpc, dst, None, corr, RpcCall(method, args))
        self.rearm_timer()
        return corr

    def after(self, delay_ns: int, fn: Callable[[], None]) -> None:
        self._later.append((self.host.now() + delay_ns, fn))
        self.rearm_timer()

    def action(self, name: str, **fields: Any) -> dict:
        rec = self.log.append({"t": self.host.now(), "type": "action", "action": name, **fields})
        self.actions.append(rec)
        log.info("coordinator action %s %s", name, fields)
        return rec

    def deliver(self, msg: ActorMessage, idx: int) -> None:
        if msg.kind is MsgKind.RpcResp:
            pending = self._pending.pop(msg.correlation_id, None)
            if pending is None:
                self.unknown_messages += 1
                return
            if pending.callback is not None:
                pending.callback(msg.body)
        elif msg.kind is MsgKind.HeartbeatAck:
            st = self.state.heartbeat_status.get(msg.src)
            if st is not None:
                st.misses = 0
                st.last_ack = self.host.now()
                if st.outstanding == msg.correlation_id:
                    st.outstanding = None
        else:
            super().deliver(msg, idx)

    # -- membership ---------------------------------------------------------

    def _commit_cfg(self, members: list[Member]) -> ClusterConfig:
        old = self.cfg_current
        for m in members:
            report = self.reports.get(m.runtime_id)
            if report is not None:
                m.workload = WorkloadReport(report.dropped_packets, report.throughput_pps, report.active_flows)
        cfg = ClusterConfig(self.cluster_id, (old.epoch if old else 0) + 1, members)
        self.log.append({"t": self.host.now(), "type": "epoch", "cluster": self.cluster_id, "cfg": cfg.to_dict()})
        self.state.apply({"type": "epoch", "cfg": cfg.to_dict()})
        for m in cfg.members:
            self.state.heartbeat_status.setdefault(m.runtime_id, HeartbeatStatus(last_ack=self.host.now()))
        for m in cfg.members:
            self.call(m.runtime_id, "notify_cluster_cfg", {"cfg": cfg.to_dict()})
        return cfg

    def _members(self) -> list[Member]:
        cfg = self.cfg_current
        return [Member.from_dict(m.to_dict()) for m in cfg.members] if cfg else []

    def deploy_cluster(self, chain_name: str, n_rt: int, n_vs: int, standby: int = 0) -> ClusterConfig:
        if n_rt < 1 or n_vs < 1:
            raise ValueError("a cluster needs at least one runtime and one virtual switch")
        self.action("Deploy", chain=chain_name, runtimes=n_rt, vswitches=n_vs, standby=standby)
        members = []
        for _ in range(n_vs):
            members.append(self._boot(Role.VirtualSwitch, True))
        for _ in range(n_rt):
            members.append(self._boot(Role.Runtime, True))
        for _ in range(standby):
            members.append(self._boot(Role.Runtime, False))
        cfg = self._commit_cfg(members)
        self.start()
        return cfg

    def _boot(self, role: Role, accepting: bool) -> Member:
        member = self.launcher.boot(role, accepting)
        if member is None:
            raise RuntimeError(f"launcher could not boot a {role.name}")
        return member

    def set_member(self, runtime_id: int, **changes: Any) -> ClusterConfig:
        members = self._members()
        for m in members:
            if m.runtime_id == runtime_id:
                for k, v in changes.items():
                    setattr(m, k, v)
        return self._commit_cfg(members)

    def remove_member(self, runtime_id: int) -> ClusterConfig:
        members = [m for m in self._members() if m.runtime_id != runtime_id]
        self.state.heartbeat_status.pop(runtime_id, None)
        cfg = self._commit_cfg(members)
        self.transport.close(runtime_id)
        self.transport.take_unreachable()
        return cfg

    def start(self) -> None:
        now = self.host.now()
        if self.ccfg.heartbeats and self._next_hb is None:
            self._next_hb = now + self.ccfg.heartbeat_period_ns
        if self.ccfg.polling and self._next_poll is None:
            self._next_poll = now + self.ccfg.poll_period_ns
        self.rearm_timer()

    # -- table I operations -------------------------------------------------

    def set_migration_target(
        self, src: int, dst: int, n: int, callback: Optional[Callable[[Optional[Any]], None]] = None
    ) -> Optional[int]:
        cfg = self.cfg_current
        live = {m.runtime_id for m in cfg.runtimes()} if cfg else set()
        if src not in live or dst not in live:
            self.action("Rejected", method="set_migration_target", src=src, dst=dst, reason="not live")
            if callback:
                callback(None)
            return None
        return self.call(src, "set_migration_target", {"dst": dst, "n": n}, callback, 3 * self.ccfg.heartbeat_period_ns)

    def set_replicas(
        self, rt: int, replica_ids: list[int], callback: Optional[Callable[[Optional[Any]], None]] = None
    ) -> Optional[int]:
        cfg = self.cfg_current
        member = cfg.member(rt) if cfg else None
        peers = {m.runtime_id for m in (cfg.members if cfg else []) if member and m.role is member.role}
        if member is None or rt in replica_ids or not set(replica_ids) <= peers:
            self.action("Rejected", method="set_replicas", runtime=rt, replicas=list(replica_ids))
            if callback:
                callback(None)
            return None
        self.log.append({"t": self.host.now(), "type": "replica_plan", "runtime": rt, "replicas": list(replica_ids)})
        self.state.replica_plan[rt] = list(replica_ids)
        return self.call(rt, "set_replicas", {"replicas": list(replica_ids)}, callback)

    # -- timers -------------------------------------------------------------

    def next_local_deadline(self) -> Optional[int]:
        times = [t for t in (self._next_hb, self._next_poll) if t is not None]
        times.extend(p.deadline for p in self._pending.values() if p.deadline is not None)
        times.extend(t for t, _ in self._later)
        return min(times) if times else None

    def local_timers(self, now: int) -> None:
        due = [item for item in self._later if item[0] <= now]
        if due:
            self._later = [item for item in self._later if item[0] > now]
            for _, fn in due:
                fn()
        expired = [c for c, p in self._pending.items() if p.deadline is not None and p.deadline <= now]
        for corr in expired:
            pending = self._pending.pop(corr)
            if pending.callback is not None:
                pending.callback(None)
        if self._next_hb is not None and self._next_hb <= now:
            self._next_hb += self.ccfg.heartbeat_period_ns
            self.heartbeat_tick(now)
        if self._next_poll is not None and self._next_poll <= now:
            self._next_poll += self.ccfg.poll_period_ns
            if not self._polling:
                self.poll_all(self._on_poll_complete)

    # -- failure detection ---------------------------------------------------

    def heartbeat_tick(self, now: int) -> list[int]:
        cfg = self.cfg_current
        if cfg is None:
            return []
        failed = []
        for m in cfg.members:
            st = self.state.heartbeat_status.setdefault(m.runtime_id, HeartbeatStatus(last_ack=now))
            if st.outstanding is not None:
                st.misses += 1
                if st.misses >= self.ccfg.miss_threshold:
                    failed.append(m.runtime_id)
                    continue
            corr = self.new_correlation()
            st.outstanding = corr
            st.sent_at = now
            self.send_msg(MsgKind.Heartbeat, m.runtime_id, None, corr)
        for rid in failed:
            self.on_failure(rid, now)
        return failed

    def on_failure(self, failed: int, now: int) -> None:
        cfg = self.cfg_current
        member = cfg.member(failed)
        st = self.state.heartbeat_status.get(failed)
        record = {"runtime": failed, "role": member.role.name, "detected_at": now, "last_ack": st.last_ack if st else 0}
        self.failures.append(record)
        self.action("Failure", **record)
        holders = [r for r in self.state.replica_plan.get(failed, []) if cfg.member(r) is not None and r != failed]
        episode = {"failed": failed, "started_at": now, "holders": holders, "replies": {}, "finished_at": None}
        self.recoveries.append(episode)

        def on_reply(holder: int) -> Callable[[Optional[Any]], None]:
            def done(reply: Optional[Any]) -> None:
                episode["replies"][holder] = reply.result if reply is not None else None
                if len(episode["replies"]) == len(holders):
                    episode["finished_at"] = self.host.now()
                    self.action("RecoveryDone", failed=failed, replies=episode["replies"])

            return done

        for holder in holders:
            self.call(holder, "recover", {"failed": failed}, on_reply(holder), 10 * self.ccfg.heartbeat_period_ns)
        if not holders:
            episode["finished_at"] = now
        # drop the dead runtime from every plan
        if failed in self.state.replica_plan:
            self.log.append({"t": now, "type": "replica_plan", "runtime": failed, "replicas": None})
            self.state.replica_plan.pop(failed)
        for rt, ids in sorted(self.state.replica_plan.items()):
            if failed in ids:
                remaining = [r for r in ids if r != failed]
                self.log.append({"t": now, "type": "replica_plan", "runtime": rt, "replicas": remaining})
                self.state.replica_plan[rt] = remaining
        self.reports.pop(failed, None)
        self.remove_member(failed)
        if member.role is Role.VirtualSwitch:
            self.launcher.vswitch_failed(failed, holders[0] if holders else None)
        if self.job is not None and (self.job.source == failed or failed in self.job.targets):
            self.action("ScaleAborted", kind=self.job.kind, source=self.job.source, reason=f"runtime {failed} failed")
            self.job = None

    # -- load polling and scaling -------------------------------------------

    def poll_all(self, callback: Optional[Callable[[dict[int, WorkloadReport], set[int]], None]] = None) -> None:
        cfg = self.cfg_current
        runtimes = [m.runtime_id for m in cfg.runtimes()] if cfg else []
        reports: dict[int, WorkloadReport] = {}
        stale: set[int] = set()
        if not runtimes:
            if callback:
                callback(reports, stale)
            return
        self._polling = True

        def collector(rid: int) -> Callable[[Optional[Any]], None]:
            def done(reply: Optional[Any]) -> None:
                if reply is None or not reply.ok:
                    stale.add(rid)
                else:
                    report = WorkloadReport.from_dict(reply.result)
                    reports[rid] = report
                    self.reports[rid] = report
                if len(reports) + len(stale) == len(runtimes):
                    self._polling = False
                    self.stale = stale
                    if callback:
                        callback(reports, stale)

            return done

        for rid in runtimes:
            self.call(rid, "poll_workload", {}, collector(rid), 3 * self.ccfg.heartbeat_period_ns)

    def _on_poll_complete(self, reports: dict[int, WorkloadReport], stale: set[int]) -> None:
        self.log.append(
            {
                "t": self.host.now(),
                "type": "poll",
                "reports": {str(r): rep.to_dict() for r, rep in sorted(reports.items())},
                "stale": sorted(stale),
            }
        )
        if self.ccfg.scaling:
            self.scaling_tick(reports)

    def scaling_tick(self, reports: dict[int, WorkloadReport]) -> list[dict]:
        cfg = self.cfg_current
        actions: list[dict] = []
        if cfg is None:
            return actions
        deltas = {}
        for rid, rep in reports.items():
            deltas[rid] = rep.dropped_packets - self._last_drops.get(rid, 0)
            self._last_drops[rid] = rep.dropped_packets
            self._peak_pps[rid] = max(self._peak_pps.get(rid, 0.0), rep.throughput_pps)
        if self.job is not None:
            return actions
        overloaded = sorted((-d, rid) for rid, d in deltas.items() if d > self.ccfg.drop_threshold)
        if overloaded:
            src = overloaded[0][1]
            actions.append(self.action("Overloaded", runtime=src, new_drops=deltas[src]))
            actions.extend(self._scale_out(src, reports[src]))
            return actions
        accepting = [m for m in cfg.runtimes() if m.accepting and m.runtime_id in reports]
        for m in accepting:
            peak = self._peak_pps.get(m.runtime_id, 0.0)
            low = peak > 0 and reports[m.runtime_id].throughput_pps < self.ccfg.low_watermark * peak
            self._idle[m.runtime_id] = self._idle.get(m.runtime_id, 0) + 1 if low else 0
        if len(accepting) > 1 and all(self._idle.get(m.runtime_id, 0) >= self.ccfg.idle_polls for m in accepting):
            victim = min(accepting, key=lambda m: (reports[m.runtime_id].throughput_pps, m.runtime_id)).runtime_id
            actions.extend(self._scale_in(victim, reports[victim], [m.runtime_id for m in accepting]))
        return actions

    def _scale_out(self, src: int, report: WorkloadReport) -> list[dict]:
        cfg = self.cfg_current
        actions = []
        spare = next((m for m in cfg.runtimes() if not m.accepting), None)
        if spare is not None:
            dst = spare.runtime_id
            actions.append(self.action("UseSpare", runtime=dst))
            self.set_member(dst, accepting=True)
        else:
            member = self.launcher.boot(Role.Runtime, True)
            if member is None:
                actions.append(self.action("Blocked", reason="no capacity to launch a runtime", source=src))
                return actions
            dst = member.runtime_id
            actions.append(self.action("LaunchRuntime", runtime=dst))
            self._commit_cfg(self._members() + [member])
        initial = report.active_flows
        goal = initial // 2
        estimate = -(-(initial - goal) // self.ccfg.batch)
        self.job = ScaleJob("out", src, [dst], initial, goal, max_batches=estimate + self.ccfg.batch_slack)
        actions.append(self.action("ScaleOutStart", source=src, target=dst, initial=initial, goal=goal))
        self._next_batch()
        return actions

    def _scale_in(self, victim: int, report: WorkloadReport, accepting: list[int]) -> list[dict]:
        others = [r for r in accepting if r != victim]
        actions = [self.action("ScaleInStart", runtime=victim, targets=others, active_flows=report.active_flows)]
        self.set_member(victim, accepting=False)
        initial = report.active_flows
        estimate = -(-initial // self.ccfg.batch)
        self.job = ScaleJob("in", victim, others, initial, 0, max_batches=estimate + self.ccfg.batch_slack)
        self._next_batch()
        return actions

    def _next_batch(self) -> None:
        job = self.job
        if job is None:
            return
        if job.batches >= job.max_batches:
            self.action("ScaleGaveUp", kind=job.kind, source=job.source, batches=job.batches)
            self.job = None
            return
        dst = job.targets[job.batches % len(job.targets)]
        job.batches += 1
        job.waiting = True
        self.action("MigrateBatch", source=job.source, target=dst, n=self.ccfg.batch, batch=job.batches)
        self.set_migration_target(job.source, dst, self.ccfg.batch, self._on_batch_ack)

    def _on_batch_ack(self, reply: Optional[Any]) -> None:
        job = self.job
        if job is None:
            return
        started = reply.result.get("started") if reply is not None and reply.ok else None
        self.action("BatchAck", source=job.source, started=started)
        self.call(job.source, "poll_workload", {}, self._on_job_poll, 3 * self.ccfg.heartbeat_period_ns)

    def _on_job_poll(self, reply: Optional[Any]) -> None:
        job = self.job
        if job is None:
            return
        if reply is None or not reply.ok:
            self.action("ScaleAborted", kind=job.kind, source=job.source, reason="source poll failed")
            self.job = None
            return
        flows = int(reply.result["active_flows"])
        live = int(reply.result.get("live_actors", flows))
        self.action("JobPoll", source=job.source, active_flows=flows, live_actors=live, goal=job.goal)
        if job.kind == "out":
            if flows <= job.goal:
                self.action("ScaleOutDone", source=job.source, active_flows=flows, goal=job.goal, batches=job.batches)
                self.job = None
            else:
                self._next_batch()
            return
        if flows > 0:
            self._next_batch()
        elif live > 0:
            # the last migrations are still in flight; look again shortly
            self.after(
                self.ccfg.heartbeat_period_ns,
                lambda: self.call(job.source, "poll_workload", {}, self._on_job_poll, 3 * self.ccfg.heartbeat_period_ns),
            )
        else:
            victim = job.source
            self.job = None
            self.action("ShutdownRuntime", runtime=victim)
            self.remove_member(victim)
            self.launcher.shutdown(victim)
            self._idle.clear()
