"""Benchmark mode: wall-clock throughput and latency with real processes.

One process per runtime, one for the generator, and the coordinator in the
calling process.  The generator steers flows to runtimes by hashing the
5-tuple (it plays the ingress switch) and ships pre-built bursts of encoded
packets over pipes, paced only by a small credit window per runtime.
Control traffic between the coordinator and the runtimes uses the reliable
transport over UDP sockets on the loopback interface.

There are no oracles here: timing is not reproducible, so only throughput
and latency are reported.
"""

from __future__ import annotations

import multiprocessing as mp
import os
import selectors
import struct
import time
import zlib
from typing import Any, Optional

from ..coordinator import Coordinator
from ..core import ClusterConfig, Member, Packet, Role, decode_packet, encode_key, encode_packet
from ..nf import build_chain
from ..node import Host, Node
from ..runtime import Runtime
from ..transport import UdpEndpoint, WireFrame
from .metrics import MetricsReport
from .scenario import Scenario
from .traffic import PacketFactory, plan_flows

_STAMP = struct.Struct("<Q")
BURST = 512
CREDITS = 8
GEN_ID = 0xFFFF_FFFF
LATENCY_EVERY = 64


class WallHost(Host):
    """Host backed by the monotonic clock; the worker loop does the scheduling."""

    def __init__(self, udp: UdpEndpoint) -> None:
        self.udp = udp
        self.tick_requested = False
        self.future_tick: Optional[int] = None
        self.timer_at: Optional[int] = None
        self.emitted = 0
        self.drops: dict[str, int] = {}
        self.latency: list[int] = []

    def now(self) -> int:
        return time.monotonic_ns()

    def send(self, src: int, dst: int, item: Any) -> bool:
        if isinstance(item, WireFrame):
            return self.udp.send(dst, item)
        return False

    def schedule_tick(self, node: Node, at: Optional[int] = None) -> None:
        if at is None:
            self.tick_requested = True
        elif self.future_tick is None or at < self.future_tick:
            self.future_tick = at

    def arm_timer(self, node: Node, at: int) -> None:
        self.timer_at = at

    def emit(self, node_id: int, pkt: Packet) -> None:
        self.emitted += 1
        if self.emitted % LATENCY_EVERY == 0:
            self.latency.append(time.monotonic_ns() - pkt.ts_created)

    def drop(self, node_id: int, reason: str, pkt: Packet) -> None:
        self.drops[reason] = self.drops.get(reason, 0) + 1


def _service(node: Node, host: WallHost, udp: UdpEndpoint) -> bool:
    """One pass over control input, ticks and timers; True if anything ran."""
    busy = False
    for frame in udp.poll():
        node.receive(frame.src, frame)
        busy = True
    now = time.monotonic_ns()
    if host.future_tick is not None and host.future_tick <= now:
        host.future_tick = None
        host.tick_requested = True
    if host.tick_requested:
        host.tick_requested = False
        node.run_tick()
        busy = True
    if host.timer_at is not None and host.timer_at <= now:
        at, host.timer_at = host.timer_at, None
        node.on_timer(at)
        busy = True
    return busy


def _runtime_worker(rid: int, slot: int, sc: Scenario, udp: UdpEndpoint, data, credits, results) -> None:
    host = WallHost(udp)
    chain = build_chain(sc.chain, sc.nf, slot=slot)
    node = Runtime(rid, host, chain, sc.runtime, sc.transport)
    sel = selectors.DefaultSelector()
    sel.register(data, selectors.EVENT_READ)
    sel.register(udp.sock, selectors.EVENT_READ)
    received = 0
    first = last = None
    cpu_first = cpu_last = 0
    done = False
    receive = node.receive
    while not done or node.input_port or host.tick_requested:
        busy = False
        if not done and data.poll():
            buf = data.recv_bytes()
            if not buf:
                done = True
            else:
                (stamp,) = _STAMP.unpack_from(buf, 0)
                offset = _STAMP.size
                end = len(buf)
                while offset < end:
                    pkt, offset = decode_packet(buf, offset)
                    pkt.ts_created = stamp
                    receive(GEN_ID, pkt)
                    received += 1
                if first is None:
                    first = time.monotonic_ns()
                    cpu_first = time.process_time_ns()
                node.run_tick()
                last = time.monotonic_ns()
                cpu_last = time.process_time_ns()
                credits.release()
                busy = True
        busy |= _service(node, host, udp)
        if not busy and not done:
            sel.select(0.001)
    # answer the coordinator's final poll before leaving
    deadline = time.monotonic_ns() + 5_000_000_000
    while time.monotonic_ns() < deadline and not results.poll():
        if not _service(node, host, udp):
            sel.select(0.001)
    results.recv()
    span = (last - first) if first is not None and last is not None and last > first else 0
    results.send(
        {
            "runtime": rid,
            "received": received,
            "emitted": host.emitted,
            "drops": host.drops,
            "span_ns": span,
            "cpu_ns": cpu_last - cpu_first,
            "latency": host.latency,
            "processed": node.processed,
        }
    )
    udp.close()


def _bursts(sc: Scenario, n_rt: int) -> list[list[bytes]]:
    """Pre-encoded packet bodies per runtime, cycled by the generator."""
    plans = plan_flows(sc.traffic)
    factory = PacketFactory(sc.traffic)
    per_rt: list[list[bytes]] = [[] for _ in range(n_rt)]
    # a few packets per flow: a SYN first, then data packets
    depth = max(2, min(16, (64 * BURST) // max(1, len(plans))))
    for k in range(depth):
        for plan in plans:
            if k >= plan.count:
                continue
            pkt = factory.make(plan, k, 0)
            per_rt[zlib.crc32(encode_key(plan.key)) % n_rt].append(encode_packet(pkt))
    out = []
    for bodies in per_rt:
        out.append([b"".join(bodies[i : i + BURST]) for i in range(0, len(bodies), BURST)] or [b""])
    return out


def _counts(bodies: list[bytes]) -> list[int]:
    counts = []
    for body in bodies:
        n = 0
        offset = 0
        while offset < len(body):
            _, offset = decode_packet(body, offset)
            n += 1
        counts.append(n)
    return counts


def _generator(bursts: list[list[bytes]], pipes, credits, seconds: float, results) -> None:
    n_rt = len(pipes)
    counts = [_counts(b) for b in bursts]
    sent = [0] * n_rt
    idx = [0] * n_rt
    stop = time.monotonic() + seconds
    rotor = 0
    while time.monotonic() < stop:
        progressed = False
        for r in range(n_rt):
            if not credits[r].acquire(False):
                continue
            i = idx[r]
            body = bursts[r][i % len(bursts[r])]
            pipes[r].send_bytes(_STAMP.pack(time.monotonic_ns()) + body)
            sent[r] += counts[r][i % len(counts[r])]
            idx[r] = i + 1
            progressed = True
        if not progressed:
            # every runtime is a full window behind; sleep until one catches up
            r = rotor = (rotor + 1) % n_rt
            if credits[r].acquire(timeout=0.01):
                credits[r].release()
    for p in pipes:
        p.send_bytes(b"")
    results.send({"sent": sent})


class _BenchLauncher:
    def __init__(self, members: list[Member]) -> None:
        self.members = list(members)

    def boot(self, role: Role, accepting: bool = True) -> Optional[Member]:
        return self.members.pop(0) if self.members and self.members[0].role is role else None

    def shutdown(self, runtime_id: int) -> None:
        pass

    def vswitch_failed(self, failed: int, replacement: Optional[int]) -> None:
        pass


def run_benchmark(sc: Scenario, runtimes: Optional[int] = None, seconds: Optional[float] = None) -> MetricsReport:
    n_rt = runtimes or sc.cluster.runtimes
    seconds = seconds or sc.benchmark_seconds
    ctx = mp.get_context("fork")
    ids = list(range(1, n_rt + 1))
    endpoints = {0: UdpEndpoint()} | {rid: UdpEndpoint() for rid in ids}
    addrs = {rid: ep.address for rid, ep in endpoints.items()}
    for ep in endpoints.values():
        ep.peers = dict(addrs)
    bursts = _bursts(sc, n_rt)
    data_pipes = [ctx.Pipe(duplex=False) for _ in ids]
    credits = [ctx.Semaphore(CREDITS) for _ in ids]
    result_pipes = [ctx.Pipe() for _ in ids]
    workers = []
    for slot, rid in enumerate(ids):
        p = ctx.Process(
            target=_runtime_worker,
            args=(rid, slot, sc, endpoints[rid], data_pipes[slot][0], credits[slot], result_pipes[slot][1]),
            daemon=True,
        )
        workers.append(p)
    gen_parent, gen_child = ctx.Pipe()
    gen = ctx.Process(target=_generator, args=(bursts, [w for _, w in data_pipes], credits, seconds, gen_child), daemon=True)

    # coordinator context: deploys the cluster view and polls over UDP
    coord_udp = endpoints[0]
    host = WallHost(coord_udp)
    members = [Member(rid, Role.Runtime, f"udp:{addrs[rid][1]}", "pipe") for rid in ids]
    coordinator = Coordinator(host, _BenchLauncher(members), sc.coordinator, sc.transport)
    coordinator.ccfg.scaling = False
    for p in workers:
        p.start()
    for rid in ids:
        endpoints[rid].sock.close()
    started = time.perf_counter()
    gen.start()
    # the coordinator has no switch to boot here; the runtimes form the cluster
    cfg_members = [Member.from_dict(m.to_dict()) for m in members]
    coordinator.state.apply({"type": "epoch", "cfg": ClusterConfig(1, 1, cfg_members).to_dict()})
    for m in cfg_members:
        coordinator.call(m.runtime_id, "notify_cluster_cfg", {"cfg": coordinator.cfg_current.to_dict()})
    coordinator.start()
    polls: list[dict] = []
    gen_result = None
    while gen_result is None:
        if not _service(coordinator, host, coord_udp):
            time.sleep(0.001)
        if gen_parent.poll():
            gen_result = gen_parent.recv()
    finals: dict[int, Optional[dict]] = {}

    def collector(rid):
        def done(reply):
            finals[rid] = reply.result if reply is not None and reply.ok else None

        return done

    for rid in ids:
        coordinator.call(rid, "poll_workload", {}, collector(rid), 500_000_000)
    deadline = time.monotonic() + 1.0
    while len(finals) < len(ids) and time.monotonic() < deadline:
        if not _service(coordinator, host, coord_udp):
            time.sleep(0.001)
    for parent, _ in result_pipes:
        parent.send("stop")
    results = [parent.recv() for parent, _ in result_pipes]
    for p in workers + [gen]:
        p.join(5)
    wall = time.perf_counter() - started
    coord_udp.close()
    polls.append({str(k): v for k, v in finals.items()})

    report = MetricsReport(scenario=sc.name, mode="benchmark", seed=sc.seed)
    report.generated = sum(gen_result["sent"])
    report.delivered = sum(r["emitted"] for r in results)
    report.dropped_nf = sum(r["drops"].get("nf", 0) for r in results)
    report.dropped_protocol = sum(r["drops"].get("protocol", 0) for r in results)
    report.dropped_overload = sum(r["drops"].get("overload", 0) for r in results)
    report.in_flight = report.generated - sum(r["received"] for r in results)
    report.latency_ns = sorted(x for r in results for x in r["latency"])
    report.per_runtime_pps = {
        r["runtime"]: (r["processed"] * 1e9 / r["span_ns"] if r["span_ns"] else 0.0) for r in results
    }
    report.coordinator_messages = len(coordinator.sent)
    report.extra = {
        "runtimes": n_rt,
        "seconds": seconds,
        "wall_s": wall,
        "aggregate_pps": sum(report.per_runtime_pps.values()),
        "final_poll": polls[-1],
        "flows": sc.traffic.flows,
        "pkt_size": sc.traffic.pkt_size,
        # throughput per CPU-second of each runtime process, i.e. on a dedicated core
        "per_core_pps": {r["runtime"]: (r["processed"] * 1e9 / r["cpu_ns"] if r["cpu_ns"] else 0.0) for r in results},
        "cpu_count": os.cpu_count(),
    }
    return report
