"""A whole cluster inside the discrete-event simulator.

One event loop owns the coordinator, every runtime and switch, all links,
the traffic generator and the virtual clock.  Node ids are handed out in
boot order starting at 1: the switches first, then the runtimes, then the
standby runtimes.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Optional

from ..actors import Mode
from ..coordinator import Coordinator
from ..core import FlowKey, Member, MsgKind, Packet, Role, encode_key
from ..nf import build_chain
from ..node import Host, Node
from ..runtime import Runtime
from ..sim import Fabric, Simulator
from ..vswitch import VirtualSwitch
from .faults import KillRuntime, RestoreLink, SilenceLink
from .metrics import PacketTracker
from .scenario import Scenario
from .traffic import Generator

GENERATOR_ID = 0xFFFF_FFFF
HOLDING = (Mode.Normal, Mode.MigrationSource)


class SimHost(Host):
    def __init__(self, cluster: SimCluster) -> None:
        self.c = cluster
        self.sim = cluster.sim
        self.fabric = cluster.fabric

    def now(self) -> int:
        return self.sim.now

    def send(self, src: int, dst: int, item: Any) -> bool:
        return self.fabric.send(src, dst, item)

    def schedule_tick(self, node: Node, at: Optional[int] = None) -> None:
        self.sim.at(self.sim.now if at is None else at, self.c.tick, node)

    def arm_timer(self, node: Node, at: int) -> None:
        self.sim.at(at, self.c.timer, node, at)

    def emit(self, node_id: int, pkt: Packet) -> None:
        self.sim.trace(f"emit|{node_id}|{tuple(pkt.key)}|{pkt.gen_seq}")
        self.c.tracker.on_emit(node_id, pkt)

    def drop(self, node_id: int, reason: str, pkt: Packet) -> None:
        self.sim.trace(f"drop|{node_id}|{reason}|{tuple(pkt.key)}|{pkt.gen_seq}")
        self.c.tracker.on_drop(node_id, reason, pkt)

    def observe(self, event: str, node_id: int, **fields: Any) -> None:
        self.c.on_observe(event, node_id, fields)


class InvariantChecker:
    """Shared-state conservation, checked after every runtime tick."""

    def __init__(self, cluster: SimCluster, chain_names: list[str]) -> None:
        self.c = cluster
        self.lb = chain_names.index("lb") if "lb" in chain_names else None
        self.nat = chain_names.index("nat") if "nat" in chain_names else None
        self.checks = 0
        self.violations: list[str] = []

    def _fail(self, what: str) -> None:
        if len(self.violations) < 50:
            self.violations.append(f"t={self.c.sim.now}: {what}")
        else:
            self.violations.append("")

    def check_runtime(self, rt: Runtime) -> None:
        self.checks += 1
        holders = [a for a in rt.flows.values() if a.states and a.mode in HOLDING]
        if self.lb is not None:
            counters = rt.shared_states[self.lb].counters
            assigned = sum(1 for a in holders if a.states[self.lb].server != -1)
            if sum(counters) != assigned or min(counters) < 0:
                self._fail(f"runtime {rt.id}: LB counters {counters} vs {assigned} assigned flows")
        if self.nat is not None:
            pool = rt.shared_states[self.nat]
            if not pool.conserved():
                self._fail(
                    f"runtime {rt.id}: NAT free {len(pool.free)} + used {len(pool.used)} + lent {len(pool.lent)}"
                    f" != capacity {pool.capacity}"
                )
            addrs = [a.states[self.nat].addr for a in holders if a.states[self.nat].addr is not None]
            if len(addrs) != len(set(addrs)) or set(addrs) != pool.held_here():
                self._fail(f"runtime {rt.id}: NAT holdings do not match the flows holding addresses")

    def check_cluster(self) -> None:
        if self.nat is None:
            return
        seen: dict[int, tuple[int, FlowKey]] = {}
        for rt in self.c.live_runtimes():
            for a in rt.flows.values():
                if a.mode is not Mode.Normal or not a.states:
                    continue
                addr = a.states[self.nat].addr
                if addr is None:
                    continue
                other = seen.get(addr)
                if other is not None:
                    self._fail(f"NAT address {addr:#x} held by {other} and {(rt.id, a.key)}")
                seen[addr] = (rt.id, a.key)

    def after_tick(self, node: Node) -> None:
        if isinstance(node, Runtime):
            self.check_runtime(node)
            self.check_cluster()


class SimLauncher:
    """Boots nodes into the simulated cluster on the coordinator's behalf."""

    def __init__(self, cluster: SimCluster) -> None:
        self.c = cluster

    def boot(self, role: Role, accepting: bool = True) -> Optional[Member]:
        c = self.c
        if role is Role.Runtime and c.runtimes_booted >= c.max_runtimes:
            return None
        node_id = c.next_id
        c.next_id += 1
        sc = c.scenario
        if role is Role.Runtime:
            chain = build_chain(sc.chain, sc.nf, slot=c.runtimes_booted)
            c.runtimes_booted += 1
            rcfg = sc.runtime
            if sc.instrument or c.record_history:
                rcfg = replace(rcfg, instrument=True)
            node: Node = Runtime(node_id, c.host, chain, rcfg, sc.transport)
        else:
            node = VirtualSwitch(
                node_id,
                c.host,
                sc.transport,
                expiry_timeout_ns=sc.vswitch_expiry_ns or sc.runtime.expiry_timeout_ns,
                timer_granularity_ns=sc.runtime.timer_granularity_ns,
            )
        c.add_node(node)
        return Member(node_id, role, f"sim:{node_id}", f"sim:{node_id}", accepting=accepting)

    def shutdown(self, runtime_id: int) -> None:
        node = self.c.nodes.get(runtime_id)
        if node is not None:
            self.c.stop_node(node)

    def vswitch_failed(self, failed: int, replacement: Optional[int]) -> None:
        self.c.retarget_ingress(failed, replacement)


class SimCluster:
    def __init__(
        self,
        scenario: Scenario,
        log_path: Optional[Path] = None,
        record_history: bool = False,
        check_invariants: Optional[bool] = None,
    ) -> None:
        self.scenario = scenario
        self.sim = Simulator()
        self.fabric = Fabric(self.sim, scenario.link, scenario.seed)
        self.fabric.on_lost = self._on_lost
        self.fabric.on_undeliverable = self._on_undeliverable
        self.host = SimHost(self)
        self.tracker = PacketTracker(lambda: self.sim.now)
        self.tracker.check_commit = scenario.instrument
        self.nodes: dict[int, Node] = {}
        self.next_id = 1
        self.runtimes_booted = 0
        self.max_runtimes = scenario.cluster.runtimes + scenario.cluster.standby + scenario.cluster.max_extra_runtimes
        self.launcher = SimLauncher(self)
        self.coordinator = Coordinator(self.host, self.launcher, scenario.coordinator, scenario.transport, log_path)
        self.fabric.attach(self.coordinator.id, self.coordinator.receive)
        self.generator = Generator(self.sim, scenario.traffic, self.inject)
        self._ingress_ids: list[int] = []
        self._retarget: dict[int, Optional[int]] = {}
        do_check = scenario.check_invariants if check_invariants is None else check_invariants
        self.checker = InvariantChecker(self, scenario.chain) if do_check else None
        self.record_history = record_history
        self.history: dict[FlowKey, dict[int, Any]] = {}
        self.events: dict[str, list[dict]] = {}
        self.finals: dict[FlowKey, Any] = {}
        self.kills: dict[int, int] = {}
        self.migration_orders: list[dict] = []

    # -- nodes --------------------------------------------------------------

    def add_node(self, node: Node) -> None:
        self.nodes[node.id] = node
        tracker = self.tracker
        receive = node.receive
        node_id = node.id

        def endpoint(src: int, item: Any) -> None:
            if item.__class__ is Packet:
                tracker.on_arrive(node_id, item)
            receive(src, item)

        self.fabric.attach(node_id, endpoint)
        if isinstance(node, VirtualSwitch):
            self._ingress_ids.append(node_id)
            self._ingress_ids.sort()

    def stop_node(self, node: Node) -> None:
        node.kill()
        self.fabric.detach(node.id)

    def live_runtimes(self) -> list[Runtime]:
        return [n for n in self.nodes.values() if isinstance(n, Runtime) and n.alive]

    def runtimes(self) -> list[Runtime]:
        return [n for n in self.nodes.values() if isinstance(n, Runtime)]

    def vswitches(self) -> list[VirtualSwitch]:
        return [n for n in self.nodes.values() if isinstance(n, VirtualSwitch)]

    def alive(self, node_id: int) -> bool:
        if node_id == GENERATOR_ID:
            return True
        node = self.nodes.get(node_id)
        return node is not None and node.alive

    # -- scheduling hooks ---------------------------------------------------

    def tick(self, node: Node) -> None:
        node.run_tick()
        if self.checker is not None and node.alive:
            self.checker.after_tick(node)

    def timer(self, node: Node, at: int) -> None:
        node.on_timer(at)
        if self.checker is not None and node.alive:
            self.checker.after_tick(node)

    # -- traffic ------------------------------------------------------------

    def ingress_for(self, key: FlowKey) -> int:
        ids = self._ingress_ids
        vs = ids[zlib.crc32(encode_key(key)) % len(ids)]
        seen = set()
        while vs in self._retarget and vs not in seen:
            seen.add(vs)
            nxt = self._retarget[vs]
            if nxt is None:
                break
            vs = nxt
        return vs

    def retarget_ingress(self, failed: int, replacement: Optional[int]) -> None:
        self._retarget[failed] = replacement

    def inject(self, pkt: Packet) -> None:
        vs = self.ingress_for(pkt.key)
        self.tracker.on_generate(pkt, vs)
        endpoint = self.fabric.endpoints.get(vs)
        if endpoint is None:
            self.host.drop(vs, "failure", pkt)
        else:
            endpoint(GENERATOR_ID, pkt)

    def _on_lost(self, src: int, dst: int, item: Any) -> None:
        if item.__class__ is Packet:
            self.host.drop(src, "link", item)

    def _on_undeliverable(self, src: int, dst: int, item: Any) -> None:
        if item.__class__ is Packet:
            self.host.drop(dst, "failure", item)

    # -- observations -------------------------------------------------------

    def on_observe(self, event: str, node_id: int, fields: dict) -> None:
        tracker = self.tracker
        if event == "processed":
            pid = (fields["key"], fields["gen_seq"])
            if tracker.check_commit:
                tracker.on_processed(node_id, pid, fields["forwarded"] and fields["replicated"])
            if self.record_history:
                self.history.setdefault(fields["key"], {})[fields["gen_seq"]] = fields["bundle"]
            return
        if event == "replica_store":
            tracker.on_replica_store(node_id, (fields["key"], fields["gen_seq"]))
            return
        if event == "degraded_emit":
            tracker.on_degraded((fields["key"], fields["gen_seq"]))
        elif event == "flow_final":
            self.finals[fields["key"]] = fields["bundle"]
            return
        self.sim.trace(f"{event}|{node_id}|{fields.get('key')}")
        self.events.setdefault(event, []).append({"node": node_id, "t": self.sim.now, **fields})

    # -- setup --------------------------------------------------------------

    def setup(self) -> None:
        sc = self.scenario
        for ev in sc.faults:
            self.sim.at(ev.at_ns, self._apply_fault, ev.action)
        for order in sc.migrations:
            self.sim.at(order.at_ns, self._order_migration, order)
        self.sim.at(0, self._deploy)
        self.generator.start()

    def _deploy(self) -> None:
        sc = self.scenario
        cl = sc.cluster
        coord = self.coordinator
        coord.deploy_cluster("->".join(sc.chain), cl.runtimes, cl.vswitches, cl.standby)
        if cl.replication:
            rts = sorted(m.runtime_id for m in coord.cfg_current.runtimes())
            for i, rid in enumerate(rts):
                # everyone else, starting with the next runtime, round-robin
                others = rts[i + 1 :] + rts[:i]
                if others:
                    coord.set_replicas(rid, others)
            vss = sorted(m.runtime_id for m in coord.cfg_current.vswitches())
            if len(vss) > 1:
                for i, vid in enumerate(vss):
                    coord.set_replicas(vid, [vss[(i + 1) % len(vss)]])

    def _apply_fault(self, action) -> None:
        if isinstance(action, KillRuntime):
            node = self.nodes.get(action.runtime)
            if node is None or not node.alive:
                return
            self.kills[action.runtime] = self.sim.now
            self.sim.trace(f"kill|{action.runtime}")
            self.stop_node(node)
        elif isinstance(action, SilenceLink):
            self.fabric.silence(action.a, action.b, True)
        elif isinstance(action, RestoreLink):
            self.fabric.silence(action.a, action.b, False)

    def _order_migration(self, order) -> None:
        rec = {"at": self.sim.now, "src": order.src, "dst": order.dst, "n": order.n, "reply": None}
        self.migration_orders.append(rec)

        def done(reply) -> None:
            rec["reply"] = reply.result if reply is not None and reply.ok else None

        self.coordinator.set_migration_target(order.src, order.dst, order.n, done)

    def run(self, until: Optional[int] = None) -> None:
        self.sim.run(self.scenario.end_ns if until is None else until)

    # -- end-of-run inspection ----------------------------------------------

    def locate_unfated(self) -> set:
        """Ids of packets physically sitting somewhere alive in the system."""
        found = set()
        for node in self.nodes.values():
            if not node.alive:
                continue
            for _, _, pkt in node.input_port:
                found.add((pkt.key, pkt.gen_seq))
            for ch in node.transport.channels.values():
                for msg in ch.pending_messages():
                    if msg.kind is MsgKind.ReplicationData:
                        pkt = msg.body.packet
                        found.add((pkt.key, pkt.gen_seq))
            if isinstance(node, Runtime):
                for actor in node.flows.values():
                    if actor.buffer:
                        for _, pkt in actor.buffer:
                            found.add((pkt.key, pkt.gen_seq))
        for (src, dst), link in self.fabric.links.items():
            if not self.alive(dst):
                continue
            for item in link.in_flight():
                if item.__class__ is Packet:
                    found.add((item.key, item.gen_seq))
        return found

    def dump_state(self) -> dict:
        """Decoded per-flow states and aggregated shared states of the run."""
        sc = self.scenario
        chain = build_chain(sc.chain, sc.nf)
        names = [nf.name for nf in chain.nfs]

        def decode(bundle) -> dict:
            return {name: asdict(nf.decode_state(blob)) for name, nf, blob in zip(names, chain.nfs, bundle.blobs)}

        flows: dict[str, dict] = {}
        for key, bundle in self.finals.items():
            flows[str(key)] = {"status": "expired", "states": decode(bundle)}
        lb_counters: Optional[list[int]] = None
        nat_held: set[int] = set()
        for rt in sorted(self.live_runtimes(), key=lambda r: r.id):
            for key, actor in rt.flows.items():
                if actor.mode is Mode.Normal and actor.states:
                    flows[str(key)] = {"status": "live", "states": decode(rt.encode_bundle(actor))}
            if "lb" in names:
                counters = rt.shared_states[names.index("lb")].counters
                lb_counters = list(counters) if lb_counters is None else [a + b for a, b in zip(lb_counters, counters)]
            if "nat" in names:
                nat_held |= rt.shared_states[names.index("nat")].held_here()
        return {
            "chain": chain.name,
            "seed": sc.seed,
            "flows": dict(sorted(flows.items())),
            "shared": {"lb_counters": lb_counters, "nat_held": sorted(nat_held)},
        }
