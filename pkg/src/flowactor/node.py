"""Scheduling skeleton shared by runtimes, virtual switches and the coordinator.

A node runs its module graphs round-robin in a fixed order on every
scheduler tick:

1. dataplane: input port -> per-flow processing -> output port
2. transport tx: drain channel outboxes onto the wire
3. transport rx: reassemble control frames, hand messages to actors
4. RPC ring: requests from the coordinator

Everything a node needs from its surroundings (clock, wire, output port,
instrumentation) goes through :class:`Host`, so the same node code runs
under the discrete-event simulator and under the wall-clock benchmark loop.
"""

from __future__ import annotations

import itertools
from collections import deque
from typing import Any, Optional

from .core import ActorMessage, ClusterConfig, MsgKind, Packet, Role, RpcCall, RpcReply
from .transport import Transport, TransportConfig, WireFrame

NS_PER_S = 1_000_000_000


class Host:
    """Environment interface of a node; the default implementation does nothing."""

    def now(self) -> int:
        raise NotImplementedError

    def send(self, src: int, dst: int, item: Any) -> bool:
        raise NotImplementedError

    def schedule_tick(self, node: Node, at: Optional[int] = None) -> None:
        raise NotImplementedError

    def arm_timer(self, node: Node, at: int) -> None:
        raise NotImplementedError

    def emit(self, node_id: int, pkt: Packet) -> None:
        """The node's output port."""

    def drop(self, node_id: int, reason: str, pkt: Packet) -> None:
        """A packet died inside the node; ``reason`` is nf, protocol or overload."""

    def observe(self, event: str, node_id: int, **fields: Any) -> None:
        """Instrumentation hook for harness oracles."""


class Node:
    role: Role = Role.Runtime

    def __init__(
        self,
        node_id: int,
        host: Host,
        transport_cfg: Optional[TransportConfig] = None,
        input_capacity: int = 4096,
        service_pps: Optional[float] = None,
    ) -> None:
        self.id = node_id
        self.host = host
        self.transport = Transport(node_id, transport_cfg)
        self.input_port: deque[tuple[int, int, Packet]] = deque()
        self.input_capacity = input_capacity
        self.service_pps = service_pps
        self._tokens = 0.0
        self._tokens_at = 0
        self._rx: deque[tuple[int, WireFrame]] = deque()
        self.rpc_ring: deque[ActorMessage] = deque()
        self.alive = True
        self.cfg: Optional[ClusterConfig] = None
        self.epochs_seen: list[int] = []
        self._arrivals = 0
        self._tick_pending = False
        self._future_tick: Optional[int] = None
        self._timer_at: Optional[int] = None
        self._corr = itertools.count(1)
        self.dropped_packets = 0
        self.processed = 0
        self.ticks = 0
        self.unknown_messages = 0

    # -- ingress -------------------------------------------------------------

    def receive(self, src: int, item: Any) -> None:
        """Called by the wire for every arriving item."""
        if not self.alive:
            return
        self._arrivals += 1
        if isinstance(item, Packet):
            if len(self.input_port) >= self.input_capacity:
                self.dropped_packets += 1
                self.host.drop(self.id, "overload", item)
            else:
                self.input_port.append((self._arrivals, src, item))
        else:
            self._rx.append((self._arrivals, item))
        self.wake()

    def wake(self, at: Optional[int] = None) -> None:
        if at is None:
            if not self._tick_pending:
                self._tick_pending = True
                self.host.schedule_tick(self)
        else:
            self.host.schedule_tick(self, at)

    def new_correlation(self) -> int:
        return (self.id << 40) | next(self._corr)

    # -- scheduling ----------------------------------------------------------

    def run_tick(self) -> None:
        self._tick_pending = False
        if not self.alive:
            return
        self.scheduler_tick()
        if self._rx or self.rpc_ring or self.transport.has_output():
            self.wake()
        elif self.input_port:
            self._wake_for_tokens()
        self.rearm_timer()

    def scheduler_tick(self) -> bool:
        self.ticks += 1
        progressed = self.graph_dataplane()
        progressed |= self.graph_tx()
        progressed |= self.graph_rx()
        progressed |= self.graph_rpc()
        return progressed

    def _budget(self) -> int:
        if self.service_pps is None:
            return len(self.input_port)
        now = self.host.now()
        self._tokens = min(
            float(self.input_capacity), self._tokens + (now - self._tokens_at) * self.service_pps / NS_PER_S
        )
        self._tokens_at = now
        return int(self._tokens)

    def _spend(self, n: int) -> None:
        if self.service_pps is not None:
            self._tokens -= n

    def _wake_for_tokens(self) -> None:
        if self.service_pps is None:
            self.wake()
            return
        now = self.host.now()
        if self._future_tick is not None and self._future_tick > now:
            return
        missing = max(0.0, 1.0 - self._tokens)
        self._future_tick = now + max(1, int(missing * NS_PER_S / self.service_pps) + 1)
        self.wake(self._future_tick)

    def graph_dataplane(self) -> bool:
        n = min(self._budget(), len(self.input_port))
        if n <= 0:
            return False
        port = self.input_port
        handle = self.on_dataplane_packet
        for _ in range(n):
            idx, src, pkt = port.popleft()
            handle(pkt, src, idx)
        self._spend(n)
        self.processed += n
        self.after_dataplane()
        return True

    def after_dataplane(self) -> None:
        pass

    def graph_tx(self) -> bool:
        frames = self.transport.drain(self.host.now())
        send = self.host.send
        for f in frames:
            send(self.id, f.dst, f)
        return bool(frames)

    def graph_rx(self) -> bool:
        if not self._rx:
            return False
        now = self.host.now()
        rx = self._rx
        while rx:
            idx, frame = rx.popleft()
            for msg in self.transport.on_frame(frame, now):
                if msg.kind is MsgKind.Rpc:
                    self.rpc_ring.append(msg)
                else:
                    self.deliver(msg, idx)
        self.handle_unreachable()
        return True

    def graph_rpc(self) -> bool:
        if not self.rpc_ring:
            return False
        ring = self.rpc_ring
        while ring:
            msg = ring.popleft()
            self.handle_rpc(msg)
        return True

    # -- timers --------------------------------------------------------------

    def next_local_deadline(self) -> Optional[int]:
        return None

    def rearm_timer(self) -> None:
        if not self.alive:
            return
        times = [t for t in (self.transport.next_deadline(), self.next_local_deadline()) if t is not None]
        if not times:
            return
        t = min(times)
        if self._timer_at is None or t < self._timer_at or self._timer_at < self.host.now():
            self._timer_at = t
            self.host.arm_timer(self, t)

    def on_timer(self, at: int) -> None:
        if not self.alive or self._timer_at != at:
            return
        self._timer_at = None
        now = self.host.now()
        self.transport.retransmit_sweep(now)
        self.local_timers(now)
        self.handle_unreachable()
        if self.transport.has_output():
            self.wake()
        self.rearm_timer()

    def local_timers(self, now: int) -> None:
        pass

    # -- messages ------------------------------------------------------------

    def send_msg(self, kind: MsgKind, dst: int, key=None, corr: int = 0, body=None) -> ActorMessage:
        msg = ActorMessage(kind, self.id, dst, key, corr, body)
        self.transport.send(msg)
        self.wake()
        return msg

    def reply_rpc(self, req: ActorMessage, ok: bool, result: Any = None, error: str = "") -> None:
        self.send_msg(MsgKind.RpcResp, req.src, None, req.correlation_id, RpcReply(ok, result, error))

    def deliver(self, msg: ActorMessage, idx: int) -> None:
        if msg.kind is MsgKind.Heartbeat:
            self.send_msg(MsgKind.HeartbeatAck, msg.src, None, msg.correlation_id)
        else:
            self.unknown_messages += 1

    def handle_rpc(self, msg: ActorMessage) -> None:
        call = msg.body
        assert isinstance(call, RpcCall)
        handler = getattr(self, "rpc_" + call.method, None)
        if handler is None:
            self.reply_rpc(msg, False, error=f"unknown rpc {call.method}")
            return
        handler(msg, **call.args)

    def handle_unreachable(self) -> None:
        for peer, msgs in self.transport.take_unreachable():
            self.on_unreachable(peer, msgs)

    def on_unreachable(self, peer: int, msgs: list[ActorMessage]) -> None:
        pass

    def rpc_notify_cluster_cfg(self, req: ActorMessage, cfg: dict) -> None:
        new = ClusterConfig.from_dict(cfg)
        if self.cfg is not None and new.epoch <= self.cfg.epoch:
            self.reply_rpc(req, True, {"epoch": self.cfg.epoch, "stale": True})
            return
        old = {m.runtime_id for m in self.cfg.members} if self.cfg else set()
        self.cfg = new
        self.epochs_seen.append(new.epoch)
        gone = old - {m.runtime_id for m in new.members}
        for peer in sorted(gone):
            if peer != self.id:
                self.transport.close(peer)
        self.on_cluster_cfg(new, gone)
        self.handle_unreachable()
        self.reply_rpc(req, True, {"epoch": new.epoch})

    def on_cluster_cfg(self, cfg: ClusterConfig, gone: set[int]) -> None:
        pass

    # -- lifecycle -----------------------------------------------------------

    def kill(self) -> list[Packet]:
        """Stop the node abruptly; returns the packets that die with it."""
        self.alive = False
        lost = [pkt for _, _, pkt in self.input_port]
        self.input_port.clear()
        self._rx.clear()
        self.rpc_ring.clear()
        return lost
