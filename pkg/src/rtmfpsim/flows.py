"""Unidirectional message flows inside a session.

A SendFlow fragments application messages into sequenced chunks, tracks what
is outstanding, applies the receiver's advertised-buffer gate and marks a
chunk for retransmission after its third loss report. A RecvFlow buffers and
reorders chunks, reassembles messages, generates acknowledgment chunks
(normally one per two data packets, immediately when a gap is seen) and
accounts the receive buffer that it advertises back to the sender.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

from . import wire

# Chunk states on the send side.
ST_QUEUED = 0
ST_IN_FLIGHT = 1
ST_RETRANSMIT = 2

LOSS_REPORT_LIMIT = 3
ACK_EVERY_N_PACKETS = 2
MAX_ACK_GAPS = 128
DEFAULT_ADV_BUFFER = 65536


@dataclass
class Message:
    payload: bytes
    time_critical: bool = False
    flow_id: int = 0


@dataclass
class OutboundChunk:
    seq: int
    frag: int
    payload: bytes
    state: int = ST_QUEUED
    sent_at: int = -1
    loss_reports: int = 0
    # After a retransmission, only acks that cover data sent later may report
    # this chunk missing again; otherwise stale acks from before the repair
    # re-mark it every round trip.
    recover_seq: int = 0


@dataclass
class AckResult:
    """Byte counts handed to the congestion controller after an ack."""
    acked_bytes: int = 0
    losses_detected: int = 0
    lost_bytes: int = 0


class SendFlow:
    def __init__(self, flow_id: int, time_critical: bool, chunk_capacity: int):
        self.flow_id = flow_id
        self.time_critical = time_critical
        self.chunk_capacity = chunk_capacity
        self.next_seq = 1
        self.peer_adv_buffer = DEFAULT_ADV_BUFFER
        self.highest_sent_seq = 0
        self._unsent: deque[OutboundChunk] = deque()
        # Sent but not yet acknowledged, ascending by seq (insertion order).
        self.outstanding: dict[int, OutboundChunk] = {}
        self._retx: deque[int] = deque()
        self.outstanding_payload = 0
        self.messages_enqueued = 0
        self.bytes_enqueued = 0
        self.retransmissions = 0
        self.loss_reports_received = 0

    def enqueue_message(self, m: Message) -> list[OutboundChunk]:
        """Fragment a message into sequenced chunks and queue them."""
        payload = m.payload
        cap = self.chunk_capacity
        pieces = [payload[i:i + cap] for i in range(0, len(payload), cap)] or [b""]
        chunks = []
        for i, piece in enumerate(pieces):
            if len(pieces) == 1:
                frag = wire.FRAG_WHOLE
            elif i == 0:
                frag = wire.FRAG_FIRST
            elif i == len(pieces) - 1:
                frag = wire.FRAG_LAST
            else:
                frag = wire.FRAG_MIDDLE
            ch = OutboundChunk(self.next_seq, frag, piece)
            self.next_seq += 1
            self._unsent.append(ch)
            chunks.append(ch)
        self.messages_enqueued += 1
        self.bytes_enqueued += len(payload)
        return chunks

    def has_pending(self) -> bool:
        return bool(self._unsent or self.outstanding)

    def has_sendable(self) -> bool:
        return self.next_chunk() is not None

    def next_chunk(self) -> Optional[OutboundChunk]:
        """Next chunk this flow would put on the wire, or None.

        Retransmissions go first; new chunks are gated so that the payload
        outstanding at the receiver never exceeds its advertised buffer.
        """
        while self._retx:
            ch = self.outstanding.get(self._retx[0])
            if ch is None or ch.state != ST_RETRANSMIT:
                self._retx.popleft()
                continue
            return ch
        if self._unsent:
            head = self._unsent[0]
            if self.outstanding_payload + len(head.payload) <= self.peer_adv_buffer:
                return head
        return None

    def mark_sent(self, ch: OutboundChunk, now: int) -> None:
        if ch.state == ST_RETRANSMIT:
            self._retx.popleft()
            ch.loss_reports = 0
            ch.recover_seq = self.highest_sent_seq
            self.retransmissions += 1
        else:
            popped = self._unsent.popleft()
            assert popped is ch, "send order must follow the queue"
            self.outstanding[ch.seq] = ch
            self.outstanding_payload += len(ch.payload)
            self.highest_sent_seq = max(self.highest_sent_seq, ch.seq)
        ch.state = ST_IN_FLIGHT
        ch.sent_at = now

    def on_ack(self, ack: wire.AckChunk, now: int) -> AckResult:
        """Retire covered chunks, refresh the flow-control gate, count losses."""
        res = AckResult()
        self.peer_adv_buffer = ack.adv_buffer
        covered: list[int] = []
        for seq in self.outstanding:
            if seq > ack.cum_ack:
                break
            covered.append(seq)
        for lo, hi in ack.gaps:
            for seq in range(lo, hi + 1):
                if seq in self.outstanding:
                    covered.append(seq)
        for seq in covered:
            ch = self.outstanding.pop(seq)
            self.outstanding_payload -= len(ch.payload)
            if ch.state == ST_IN_FLIGHT:
                res.acked_bytes += len(ch.payload)
        max_acked = ack.cum_ack
        if ack.gaps:
            max_acked = max(max_acked, ack.gaps[-1][1])
        for seq, ch in self.outstanding.items():
            if seq >= max_acked:
                break
            if ch.state != ST_IN_FLIGHT or max_acked <= ch.recover_seq:
                continue
            ch.loss_reports += 1
            self.loss_reports_received += 1
            if ch.loss_reports >= LOSS_REPORT_LIMIT:
                ch.state = ST_RETRANSMIT
                self._retx.append(seq)
                res.losses_detected += 1
                res.lost_bytes += len(ch.payload)
        return res

    def force_retransmit_all(self) -> int:
        """RTO: mark everything in flight for retransmission; -> payload bytes moved."""
        moved = 0
        for seq, ch in self.outstanding.items():
            if ch.state == ST_IN_FLIGHT:
                ch.state = ST_RETRANSMIT
                ch.loss_reports = 0
                self._retx.append(seq)
                moved += len(ch.payload)
        return moved


class RecvFlow:
    def __init__(self, flow_id: int, rcv_buffer_size: int, time_critical: bool = False):
        self.flow_id = flow_id
        self.rcv_buffer_size = rcv_buffer_size
        self.time_critical = time_critical
        self.cum_ack = 0
        self._buffer: dict[int, tuple[int, bytes]] = {}  # seq -> (frag, payload)
        self._partial: list[bytes] = []
        self._next_deliver = 1
        self._ready: deque[Message] = deque()
        self.occupied_bytes = 0
        self.data_since_last_ack = 0
        self.last_advertised = rcv_buffer_size
        self.messages_delivered = 0
        self.bytes_delivered = 0
        self.acks_sent = 0
        self.loss_reports_issued = 0
        self.data_packets_received = 0
        self.duplicates = 0
        self.discarded_full = 0

    def adv_buffer(self) -> int:
        return max(0, self.rcv_buffer_size - self.occupied_bytes)

    def has_gaps(self) -> bool:
        return bool(self._buffer) and max(self._buffer) > self.cum_ack

    def on_data_chunk(self, c: wire.DataChunk, now: int) -> None:
        """Buffer one chunk; ack emission is decided at end_of_packet()."""
        if c.seq <= self.cum_ack or c.seq in self._buffer:
            self.duplicates += 1
            return
        if self.occupied_bytes + len(c.payload) > self.rcv_buffer_size:
            self.discarded_full += 1
            return
        self._buffer[c.seq] = (c.frag, c.payload)
        self.occupied_bytes += len(c.payload)
        while self.cum_ack + 1 in self._buffer:
            self.cum_ack += 1
        self._reassemble()

    def _reassemble(self) -> None:
        while self._next_deliver <= self.cum_ack:
            frag, payload = self._buffer.pop(self._next_deliver)
            self._next_deliver += 1
            if frag == wire.FRAG_WHOLE:
                assert not self._partial, "whole chunk inside a fragment run"
                self._ready.append(Message(payload, flow_id=self.flow_id))
            elif frag == wire.FRAG_FIRST:
                assert not self._partial, "nested first fragment"
                self._partial = [payload]
            elif frag == wire.FRAG_MIDDLE:
                assert self._partial, "middle fragment without first"
                self._partial.append(payload)
            else:  # FRAG_LAST
                assert self._partial, "last fragment without first"
                self._partial.append(payload)
                self._ready.append(Message(b"".join(self._partial), flow_id=self.flow_id))
                self._partial = []

    def end_of_packet(self, now: int) -> Optional[wire.AckChunk]:
        """Count one received data packet; ack on cadence or on a gap."""
        self.data_packets_received += 1
        self.data_since_last_ack += 1
        if self.has_gaps() or self.data_since_last_ack >= ACK_EVERY_N_PACKETS:
            return self.make_ack(now)
        return None

    def make_ack(self, now: int) -> wire.AckChunk:
        gaps: list[tuple[int, int]] = []
        if self._buffer:
            run_start = None
            prev = None
            for seq in sorted(self._buffer):
                if seq <= self.cum_ack:
                    continue
                if run_start is None:
                    run_start, prev = seq, seq
                elif seq == prev + 1:
                    prev = seq
                else:
                    gaps.append((run_start, prev))
                    run_start, prev = seq, seq
            if run_start is not None:
                gaps.append((run_start, prev))
            del gaps[MAX_ACK_GAPS:]
        adv = self.adv_buffer()
        self.last_advertised = adv
        self.data_since_last_ack = 0
        self.acks_sent += 1
        if gaps:
            self.loss_reports_issued += 1
        return wire.AckChunk(self.flow_id, self.cum_ack, gaps, adv)

    def ack_pending(self) -> bool:
        return self.data_since_last_ack > 0

    def has_ready(self) -> bool:
        return bool(self._ready)

    def app_read(self, max_bytes: Optional[int] = None) -> list[Message]:
        """Pop reassembled messages in order, freeing their buffer space."""
        out: list[Message] = []
        taken = 0
        while self._ready:
            if max_bytes is not None and out and taken + len(self._ready[0].payload) > max_bytes:
                break
            m = self._ready.popleft()
            taken += len(m.payload)
            out.append(m)
        self.occupied_bytes -= taken
        self.messages_delivered += len(out)
        self.bytes_delivered += taken
        return out

    def window_update_due(self, threshold: int) -> bool:
        """True when the last advertised buffer was too small to accept a full
        chunk but space has been freed since; the sender needs an ack to resume.
        Small buffers use half the buffer instead of the full chunk size."""
        effective = min(threshold, max(1, self.rcv_buffer_size // 2))
        return self.last_advertised < effective <= self.adv_buffer()


def fill_packet(session, budget: int, payload_budget: Optional[int] = None,
                now: int = 0) -> Optional[list[wire.DataChunk]]:
    """Greedy bundler: pick sendable chunks for one packet of at most `budget`
    wire bytes (and optionally at most `payload_budget` payload bytes).

    Time-critical flows have absolute priority; flows of equal priority are
    served round-robin, lowest unsent sequence first, retransmissions before
    new chunks. Returns None when nothing is eligible.
    """
    flows = list(session.send_flows.values())
    tc = [f for f in flows if f.time_critical]
    normal = [f for f in flows if not f.time_critical]
    picked: list[tuple[SendFlow, OutboundChunk]] = []
    wire_len = wire.PACKET_HEADER
    pay_len = 0
    for group, cursor_key in ((tc, True), (normal, False)):
        if not group:
            continue
        start = session.rr_cursor.get(cursor_key, 0) % len(group)
        order = group[start:] + group[:start]
        progress = True
        while progress:
            progress = False
            for f in order:
                ch = f.next_chunk()
                if ch is None:
                    continue
                add = wire.CHUNK_HEADER + len(ch.payload)
                if wire_len + add > budget:
                    continue
                if payload_budget is not None and pay_len + len(ch.payload) > payload_budget:
                    continue
                f.mark_sent(ch, now)
                picked.append((f, ch))
                wire_len += add
                pay_len += len(ch.payload)
                progress = True
        session.rr_cursor[cursor_key] = (start + 1) % len(group)
    if not picked:
        return None
    # Whether the packet is MTU-full (the next eligible chunk did not fit):
    # consumed by bundling statistics.
    full = False
    for f in flows:
        ch = f.next_chunk()
        if ch is not None and wire_len + wire.CHUNK_HEADER + len(ch.payload) > budget:
            full = True
            break
    session.last_fill_was_full = full
    return [wire.DataChunk(f.flow_id, ch.seq, ch.frag, f.time_critical, ch.payload)
            for f, ch in picked]
