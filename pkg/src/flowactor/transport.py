"""Reliable actor-message passing over unreliable frames.

Each runtime keeps one :class:`Channel` per remote peer.  Outgoing messages
are encoded, split into MTU-sized ControlData frames carrying consecutive
sequence numbers, and held until a cumulative ControlAck covers them.  The
receiver reassembles the in-order byte stream and cuts it back into
messages using the codec's length prefix, so fragments need no header of
their own.

Dataplane frames bypass all of this: no sequence numbers, no retransmission.
"""

from __future__ import annotations

import enum
import heapq
import socket
import struct
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional

from .core import MTU, ActorMessage, DecodeError, Packet, decode_message, decode_packet, encode_message, encode_packet, message_length

NS_PER_S = 1_000_000_000


class FrameKind(enum.IntEnum):
    Dataplane = 0
    ControlData = 1
    ControlAck = 2


@dataclass(slots=True)
class WireFrame:
    kind: FrameKind
    src: int
    dst: int
    seq: int = 0
    ack: int = 0
    payload: bytes = b""


_FRAME = struct.Struct("<BIIQQH")


def encode_frame(frame: WireFrame) -> bytes:
    return _FRAME.pack(frame.kind, frame.src, frame.dst, frame.seq, frame.ack, len(frame.payload)) + frame.payload


def decode_frame(buf, offset: int = 0) -> tuple[WireFrame, int]:
    try:
        kind, src, dst, seq, ack, n = _FRAME.unpack_from(buf, offset)
        kind = FrameKind(kind)
    except (struct.error, ValueError) as exc:
        raise DecodeError(f"bad frame header: {exc}") from None
    start = offset + _FRAME.size
    payload = bytes(buf[start : start + n])
    if len(payload) != n:
        raise DecodeError("truncated frame payload")
    return WireFrame(kind, src, dst, seq, ack, payload), start + n


def dataplane_frame(src: int, dst: int, pkt: Packet) -> WireFrame:
    return WireFrame(FrameKind.Dataplane, src, dst, payload=encode_packet(pkt))


def frame_packet(frame: WireFrame) -> Packet:
    pkt, _ = decode_packet(frame.payload)
    return pkt


def iter_frames(buf) -> Iterable[WireFrame]:
    """Decode a burst of back-to-back encoded frames."""
    offset = 0
    end = len(buf)
    while offset < end:
        frame, offset = decode_frame(buf, offset)
        yield frame


@dataclass
class TransportConfig:
    mtu: int = MTU
    window: int = 4096
    initial_rtt_ns: int = 200_000
    rto_multiplier: int = 10
    rto_cap_ns: int = NS_PER_S
    max_retries: int = 32
    rtt_gain: float = 0.125


@dataclass(slots=True)
class _Pending:
    frame: WireFrame
    send_time: Optional[int] = None
    retries: int = 0
    first_send: Optional[int] = None


class Channel:
    """Sender and receiver state for one peer."""

    def __init__(self, local: int, peer: int, cfg: Optional[TransportConfig] = None) -> None:
        self.local = local
        self.peer = peer
        self.cfg = cfg or TransportConfig()
        self.next_seq = 1
        self.unacked: dict[int, _Pending] = {}
        self.rtt_estimate = self.cfg.initial_rtt_ns
        self.rtt_sampled = False
        self.rx_expected = 1
        self.rx_ooo: dict[int, bytes] = {}
        self._reasm = bytearray()
        self._backlog: deque[tuple[bytes, ActorMessage]] = deque()
        # (last seq of message, message) for messages sent but not fully acked
        self._inflight: deque[tuple[int, ActorMessage]] = deque()
        self._deadlines: list[tuple[int, int]] = []
        self.outbox: list[WireFrame] = []
        self.ack_due = False
        self.broken = False
        self._surfaced: list[ActorMessage] = []
        self.transmissions = 0
        self.retransmissions = 0
        self.delivered = 0
        self.retransmit_log: list[tuple[int, int, int]] = []  # (seq, first_send, resend_time)
        self.log_retransmits = False

    # -- sending -------------------------------------------------------------

    def send_reliable(self, msg: ActorMessage) -> bool:
        """Queue ``msg``.  Returns False when the window is full and the
        message was parked in the local backlog instead."""
        return self.send_encoded(encode_message(msg), msg)

    def send_encoded(self, data: bytes, msg: ActorMessage) -> bool:
        if self.broken:
            self._surfaced.append(msg)
            return False
        nfrag = max(1, -(-len(data) // self.cfg.mtu))
        if self._backlog or len(self.unacked) + nfrag > self.cfg.window:
            self._backlog.append((data, msg))
            return False
        self._emit(data, msg)
        return True

    def _emit(self, data: bytes, msg: ActorMessage) -> None:
        mtu = self.cfg.mtu
        for off in range(0, len(data), mtu):
            seq = self.next_seq
            self.next_seq += 1
            frame = WireFrame(FrameKind.ControlData, self.local, self.peer, seq, 0, data[off : off + mtu])
            self.unacked[seq] = _Pending(frame)
            self.outbox.append(frame)
        self._inflight.append((self.next_seq - 1, msg))

    def fragments_for(self, size: int) -> int:
        return max(1, -(-size // self.cfg.mtu))

    def timeout_for(self, retries: int) -> int:
        return min(int(self.cfg.rto_multiplier * self.rtt_estimate * (2**retries)), self.cfg.rto_cap_ns)

    def mark_sent(self, frame: WireFrame, now: int) -> None:
        if frame.kind is not FrameKind.ControlData:
            return
        p = self.unacked.get(frame.seq)
        if p is None:
            return
        p.send_time = now
        if p.first_send is None:
            p.first_send = now
            self.transmissions += 1
        heapq.heappush(self._deadlines, (now + self.timeout_for(p.retries), frame.seq))

    def backlog_size(self) -> int:
        return len(self._backlog)

    # -- receiving -----------------------------------------------------------

    def on_frame(self, frame: WireFrame, now: int) -> list[ActorMessage]:
        if frame.kind is FrameKind.ControlAck:
            self._on_ack(frame.ack, now)
            return []
        if frame.kind is not FrameKind.ControlData:
            raise ValueError("dataplane frames do not belong to a channel")
        self.ack_due = True
        seq = frame.seq
        if seq < self.rx_expected or seq in self.rx_ooo:
            return []
        if seq != self.rx_expected:
            if len(self.rx_ooo) < self.cfg.window:
                self.rx_ooo[seq] = frame.payload
            return []
        self._reasm += frame.payload
        self.rx_expected += 1
        while self.rx_expected in self.rx_ooo:
            self._reasm += self.rx_ooo.pop(self.rx_expected)
            self.rx_expected += 1
        return self._cut_messages()

    def _cut_messages(self) -> list[ActorMessage]:
        out = []
        buf = self._reasm
        offset = 0
        while True:
            total = message_length(buf, offset)
            if total is None or len(buf) - offset < total:
                break
            out.append(decode_message(bytes(buf[offset : offset + total])))
            offset += total
        if offset:
            del buf[:offset]
        self.delivered += len(out)
        return out

    def _on_ack(self, ack: int, now: int) -> None:
        unacked = self.unacked
        while unacked:
            seq = next(iter(unacked))
            if seq > ack:
                break
            p = unacked.pop(seq)
            if p.retries == 0 and p.send_time is not None:
                # only unambiguous samples (never-retransmitted frames) feed the estimate
                sample = max(1, now - p.send_time)
                if self.rtt_sampled:
                    g = self.cfg.rtt_gain
                    self.rtt_estimate = (1 - g) * self.rtt_estimate + g * sample
                else:
                    self.rtt_estimate = float(sample)
                    self.rtt_sampled = True
        while self._inflight and self._inflight[0][0] <= ack:
            self._inflight.popleft()
        while self._backlog and not self.broken:
            data, msg = self._backlog[0]
            if len(self.unacked) + self.fragments_for(len(data)) > self.cfg.window:
                break
            self._backlog.popleft()
            self._emit(data, msg)

    def take_ack(self) -> Optional[WireFrame]:
        if not self.ack_due:
            return None
        self.ack_due = False
        return WireFrame(FrameKind.ControlAck, self.local, self.peer, 0, self.rx_expected - 1)

    # -- timers --------------------------------------------------------------

    def retransmit_sweep(self, now: int) -> int:
        if self.broken:
            return 0
        resent = 0
        heap = self._deadlines
        while heap and heap[0][0] <= now:
            _, seq = heapq.heappop(heap)
            p = self.unacked.get(seq)
            if p is None or p.send_time is None:
                continue
            timeout = self.timeout_for(p.retries)
            if now - p.send_time < timeout:
                heapq.heappush(heap, (p.send_time + timeout, seq))
                continue
            if p.retries >= self.cfg.max_retries:
                self.declare_broken()
                return resent
            p.retries += 1
            p.send_time = None
            self.retransmissions += 1
            if self.log_retransmits:
                self.retransmit_log.append((seq, p.first_send, now))
            self.outbox.append(p.frame)
            resent += 1
        return resent

    def next_deadline(self) -> Optional[int]:
        if self.broken:
            return None
        heap = self._deadlines
        while heap and heap[0][1] not in self.unacked:
            heapq.heappop(heap)
        return heap[0][0] if heap else None

    def declare_broken(self) -> None:
        if self.broken:
            return
        self.broken = True
        self._surfaced.extend(msg for _, msg in self._inflight)
        self._surfaced.extend(msg for _, msg in self._backlog)
        self._inflight.clear()
        self._backlog.clear()
        self.unacked.clear()
        self._deadlines.clear()
        self.outbox = [f for f in self.outbox if f.kind is not FrameKind.ControlData]

    def take_unreachable(self) -> list[ActorMessage]:
        out, self._surfaced = self._surfaced, []
        return out

    def pending_messages(self) -> list[ActorMessage]:
        """Messages sent or queued but not yet fully acknowledged."""
        return [msg for _, msg in self._inflight] + [msg for _, msg in self._backlog]


class Transport:
    """All channels of one endpoint."""

    def __init__(self, local: int, cfg: Optional[TransportConfig] = None) -> None:
        self.local = local
        self.cfg = cfg or TransportConfig()
        self.channels: dict[int, Channel] = {}
        self.messages_sent = 0

    def channel(self, peer: int) -> Channel:
        ch = self.channels.get(peer)
        if ch is None:
            ch = self.channels[peer] = Channel(self.local, peer, self.cfg)
        return ch

    def send(self, msg: ActorMessage) -> bool:
        self.messages_sent += 1
        return self.channel(msg.dst).send_reliable(msg)

    def has_output(self) -> bool:
        return any(ch.outbox or ch.ack_due for ch in self.channels.values())

    def drain(self, now: int) -> list[WireFrame]:
        frames = []
        for ch in self.channels.values():
            ack = ch.take_ack()
            if ack is not None:
                frames.append(ack)
            if ch.outbox:
                for f in ch.outbox:
                    ch.mark_sent(f, now)
                frames.extend(ch.outbox)
                ch.outbox = []
        return frames

    def on_frame(self, frame: WireFrame, now: int) -> list[ActorMessage]:
        return self.channel(frame.src).on_frame(frame, now)

    def retransmit_sweep(self, now: int) -> int:
        return sum(ch.retransmit_sweep(now) for ch in self.channels.values())

    def next_deadline(self) -> Optional[int]:
        times = [t for t in (ch.next_deadline() for ch in self.channels.values()) if t is not None]
        return min(times) if times else None

    def take_unreachable(self) -> list[tuple[int, list[ActorMessage]]]:
        out = []
        for peer, ch in self.channels.items():
            msgs = ch.take_unreachable()
            if msgs:
                out.append((peer, msgs))
        return out

    def close(self, peer: int) -> None:
        """Give up on ``peer`` (e.g. it left the cluster); pending messages surface."""
        self.channel(peer).declare_broken()

    def is_broken(self, peer: int) -> bool:
        ch = self.channels.get(peer)
        return ch is not None and ch.broken


class UdpEndpoint:
    """Datagram socket carrying encoded frames; the non-simulated link.

    Delivery may drop or reorder; the channel protocol above tolerates both.
    """

    def __init__(self, bind: tuple[str, int] = ("127.0.0.1", 0)) -> None:
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(bind)
        self.sock.setblocking(False)
        self.peers: dict[int, tuple[str, int]] = {}

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    def send(self, dst: int, frame: WireFrame) -> bool:
        addr = self.peers.get(dst)
        if addr is None:
            return False
        try:
            self.sock.sendto(encode_frame(frame), addr)
        except (BlockingIOError, OSError):
            return False
        return True

    def poll(self, limit: int = 256) -> list[WireFrame]:
        out = []
        for _ in range(limit):
            try:
                data, _ = self.sock.recvfrom(65535)
            except (BlockingIOError, InterruptedError):
                break
            try:
                out.extend(iter_frames(data))
            except DecodeError:
                continue
        return out

    def close(self) -> None:
        self.sock.close()
