"""The protocol layer: sessions, four-way handshake, demultiplexing, address
mobility, packet transmission and loss recovery timers.

One engine instance binds one UDP port on one host. Applications register
under an endpoint discriminator (EPD); inbound handshakes for that EPD are
routed to the registered app. Each session owns its congestion controller
and its send/receive flow tables; all activity is driven by the simulator's
single event loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import cc as cc_mod
from . import flows as flows_mod
from . import netsim, wire

HANDSHAKE_SID = 0

S_IDLE = "Idle"
S_IHELLO_SENT = "IHelloSent"
S_RHELLO_SENT = "RHelloSent"
S_KEYING_SENT = "KeyingSent"
S_OPEN = "Open"
S_CLOSED = "Closed"


class ConfigurationError(Exception):
    """Invalid engine/app wiring detected before or at startup."""


@dataclass
class EngineParams:
    local_port: int = 4711
    max_segment_size: int = 1472
    rcv_buffer_size: int = 65536
    cc_params: cc_mod.CcParams = field(default_factory=cc_mod.CcParams)
    handshake_timeout_us: int = 1_000_000
    handshake_attempts: int = 5
    rto_min_us: int = 200_000
    rto_initial_us: int = 1_000_000
    delayed_ack_us: int = 50_000

    @property
    def chunk_capacity(self) -> int:
        return self.max_segment_size - wire.PACKET_HEADER - wire.CHUNK_HEADER


class Session:
    """Bidirectional peer relationship with handshake state and flow tables."""

    def __init__(self, engine: "RtmfpEngine", role: str, local_epd: int,
                 remote_epd: int, local_sid: int):
        self.engine = engine
        self.role = role  # "initiator" | "responder"
        self.local_epd = local_epd
        self.remote_epd = remote_epd
        self.local_sid = local_sid          # the peer addresses us with this id
        self.peer_sid: Optional[int] = None
        self.peer_address: Optional[tuple[str, int]] = None
        self.state = S_IDLE
        self.app = None
        self.cc = cc_mod.CongestionController(engine.params.cc_params)
        self.send_flows: dict[int, flows_mod.SendFlow] = {}
        self.recv_flows: dict[int, flows_mod.RecvFlow] = {}
        self.rr_cursor: dict[bool, int] = {}
        self.last_fill_was_full = False
        self.tc_active = False
        self.peer_signaled_tc = False
        self.candidates: list[tuple[str, int]] = []
        self.hs_sends = 0
        self.hs_timer: Optional[netsim.Event] = None
        self.srtt_us: Optional[int] = None
        self.rttvar_us: int = 0
        self.rto_backoff = 1
        self.rto_timer: Optional[netsim.Event] = None
        self.rto_deadline: Optional[int] = None
        self.last_peer_ts: int = wire.TS_NONE
        # Counters exported to the harness.
        self.packets_in = 0
        self.packets_out = 0
        self.handshake_retries = 0
        self.mobility_events = 0
        self.rto_fires = 0
        self.stale_handshake = 0
        self.data_packets_out = 0
        self.full_packets_out = 0
        self.full_packet_chunks = 0

    @property
    def label(self) -> str:
        arrow = "->" if self.role == "initiator" else "<-"
        return f"{self.local_epd}{arrow}{self.remote_epd}"

    def rto_us(self) -> int:
        p = self.engine.params
        if self.srtt_us is None:
            base = p.rto_initial_us
        else:
            base = max(p.rto_min_us, self.srtt_us + 4 * self.rttvar_us)
        return base * self.rto_backoff

    def observe_rtt(self, sample_us: int) -> None:
        if self.srtt_us is None:
            self.srtt_us = sample_us
            self.rttvar_us = sample_us // 2
        else:
            self.rttvar_us = (3 * self.rttvar_us + abs(self.srtt_us - sample_us)) // 4
            self.srtt_us = (7 * self.srtt_us + sample_us) // 8
        self.cc.loss_coalesce_us = self.srtt_us

    def in_flight(self) -> bool:
        return any(f.outstanding for f in self.send_flows.values())

    def create_send_flow(self, flow_id: int, time_critical: bool) -> flows_mod.SendFlow:
        if self.state != S_OPEN:
            raise ConfigurationError("flows can only be created on an Open session")
        if flow_id in self.send_flows:
            raise ConfigurationError(f"duplicate send flow id {flow_id}")
        f = flows_mod.SendFlow(flow_id, time_critical, self.engine.params.chunk_capacity)
        self.send_flows[flow_id] = f
        return f


class RtmfpEngine:
    """Protocol layer bound to one (host, port)."""

    def __init__(self, sim: netsim.Simulator, host, params: EngineParams | None = None):
        self.sim = sim
        self.host = host
        self.params = params or EngineParams()
        self.local_port = self.params.local_port
        host.bind(self.local_port, self.handle_datagram)
        self.apps: dict[int, object] = {}
        self.sessions: dict[int, Session] = {}
        self._half_open: dict[tuple, Session] = {}
        self.registry = cc_mod.CcRegistry()
        self._rng = sim.stream(f"engine:{host.node_id}:{self.local_port}")
        self._delack: dict[tuple[int, int], netsim.Event] = {}
        self.decode_errors = 0
        self.unknown_session = 0
        self.unknown_epd = 0
        self.delivered_packets = 0
        self.stale_acks = 0
        self.handshakes_completed = 0
        self.sessions_failed = 0
        self.cwnd_log: list[tuple[int, str, str, int, int, str]] = []

    # ------------------------------------------------------------------ setup

    def register_app(self, epd: int, app) -> None:
        if epd in self.apps:
            raise ConfigurationError(f"EPD {epd} already registered")
        self.apps[epd] = app

    def open_session(self, local_epd: int, remote_epd: int,
                     candidates: list[tuple[str, int]], now: int) -> Session:
        if not candidates:
            raise ConfigurationError("open_session needs at least one candidate address")
        s = Session(self, "initiator", local_epd, remote_epd, self._fresh_sid())
        s.app = self.apps.get(local_epd)
        s.candidates = list(candidates)
        s.state = S_IHELLO_SENT
        self.sessions[s.local_sid] = s
        self._send_ihello(s, now)
        self._arm_handshake_timer(s, now)
        return s

    def _fresh_sid(self) -> int:
        while True:
            sid = self._rng.getrandbits(32)
            if sid != HANDSHAKE_SID and sid not in self.sessions:
                return sid

    # ------------------------------------------------------------- handshake

    def _send_ihello(self, s: Session, now: int) -> None:
        s.hs_sends += 1
        chunk = wire.HandshakeChunk(wire.T_IHELLO, epd=s.remote_epd, sid=s.local_sid)
        for addr in s.candidates:
            self._send_packet(s, HANDSHAKE_SID, [chunk], addr, now, established=False)

    def _arm_handshake_timer(self, s: Session, now: int) -> None:
        delay = self.params.handshake_timeout_us * (1 << (s.hs_sends - 1))
        s.hs_timer = self.sim.after(
            delay, self.host.node_id, netsim.KIND_TIMER,
            lambda t: self._on_handshake_timer(s, t), f"handshake {s.label}")

    def _on_handshake_timer(self, s: Session, now: int) -> None:
        if s.state in (S_OPEN, S_CLOSED):
            return
        if s.hs_sends >= self.params.handshake_attempts:
            s.state = S_CLOSED
            self.sessions_failed += 1
            if s.app is not None:
                s.app.session_failed(s, now)
            return
        s.handshake_retries += 1
        if s.state == S_IHELLO_SENT:
            self._send_ihello(s, now)
        elif s.state == S_KEYING_SENT:
            s.hs_sends += 1
            self._send_packet(
                s, s.peer_sid,
                [wire.HandshakeChunk(wire.T_IIKEYING, sid=s.local_sid)],
                s.peer_address, now, established=False)
        self._arm_handshake_timer(s, now)

    def _on_ihello(self, dgram: netsim.Datagram, chunk: wire.HandshakeChunk,
                   peer_ts: int, now: int) -> None:
        app = self.apps.get(chunk.epd)
        if app is None:
            self.unknown_epd += 1
            return
        key = (dgram.src, chunk.sid, chunk.epd)
        s = self._half_open.get(key)
        if s is None:
            s = Session(self, "responder", chunk.epd, 0, self._fresh_sid())
            s.app = app
            s.peer_sid = chunk.sid
            s.peer_address = dgram.src
            s.state = S_RHELLO_SENT
            self.sessions[s.local_sid] = s
            self._half_open[key] = s
            # Garbage-collect a half-open responder session that never completes.
            total_wait = self.params.handshake_timeout_us * (
                (1 << self.params.handshake_attempts) - 1)
            self.sim.after(total_wait, self.host.node_id, netsim.KIND_TIMER,
                           lambda t: self._gc_half_open(s), f"hs-gc {s.label}")
        s.last_peer_ts = peer_ts
        if s.state in (S_RHELLO_SENT,):
            self._send_packet(
                s, s.peer_sid,
                [wire.HandshakeChunk(wire.T_RHELLO, epd=chunk.epd, sid=s.local_sid)],
                s.peer_address, now, established=False)

    def _gc_half_open(self, s: Session) -> None:
        if s.state not in (S_OPEN, S_CLOSED):
            s.state = S_CLOSED

    def _on_handshake_chunk(self, s: Session, chunk: wire.HandshakeChunk,
                            dgram: netsim.Datagram, now: int) -> None:
        if chunk.kind == wire.T_RHELLO:
            if s.state != S_IHELLO_SENT:
                s.stale_handshake += 1
                return
            s.peer_sid = chunk.sid
            s.peer_address = dgram.src
            s.state = S_KEYING_SENT
            if s.hs_timer:
                s.hs_timer.cancel()
            s.hs_sends += 1
            self._send_packet(s, s.peer_sid,
                              [wire.HandshakeChunk(wire.T_IIKEYING, sid=s.local_sid)],
                              s.peer_address, now, established=False)
            self._arm_handshake_timer(s, now)
        elif chunk.kind == wire.T_IIKEYING:
            if s.state == S_RHELLO_SENT:
                s.state = S_OPEN
                self.handshakes_completed += 1
                self.registry.add(s)
                self._send_packet(s, s.peer_sid,
                                  [wire.HandshakeChunk(wire.T_RIKEYING, sid=s.local_sid)],
                                  s.peer_address, now, established=False)
                if s.app is not None:
                    s.app.session_opened(s, now)
            elif s.state == S_OPEN:
                # Our RIKeying was lost; repeat it.
                self._send_packet(s, s.peer_sid,
                                  [wire.HandshakeChunk(wire.T_RIKEYING, sid=s.local_sid)],
                                  s.peer_address, now, established=False)
            else:
                s.stale_handshake += 1
        elif chunk.kind == wire.T_RIKEYING:
            if s.state != S_KEYING_SENT:
                s.stale_handshake += 1
                return
            s.state = S_OPEN
            self.handshakes_completed += 1
            if s.hs_timer:
                s.hs_timer.cancel()
            self.registry.add(s)
            if s.app is not None:
                s.app.session_opened(s, now)
            self.transmit_opportunity(s, now)
        else:
            s.stale_handshake += 1

    # ----------------------------------------------------------------- demux

    def handle_datagram(self, dgram: netsim.Datagram, now: int) -> None:
        try:
            pkt = wire.decode(dgram.payload)
        except wire.DecodeError:
            self.decode_errors += 1
            return
        if pkt.session_id == HANDSHAKE_SID:
            handled = False
            for chunk in pkt.chunks:
                if isinstance(chunk, wire.HandshakeChunk) and chunk.kind == wire.T_IHELLO:
                    self._on_ihello(dgram, chunk, pkt.timestamp, now)
                    handled = True
            if handled:
                self.delivered_packets += 1
            else:
                self.unknown_session += 1
            return
        s = self.sessions.get(pkt.session_id)
        if s is None or s.state == S_CLOSED:
            self.unknown_session += 1
            return
        self.delivered_packets += 1
        s.packets_in += 1
        s.last_peer_ts = pkt.timestamp
        if pkt.ts_echo != wire.TS_NONE:
            rtt_ms = (now // 1000 - pkt.ts_echo) & 0xFFFF
            if rtt_ms < 30_000:
                s.observe_rtt(rtt_ms * 1000)
        if s.state == S_OPEN:
            if dgram.src != s.peer_address:
                s.peer_address = dgram.src
                s.mobility_events += 1
            tc = bool(pkt.flags & wire.FLAG_TIME_CRITICAL)
            if tc != s.peer_signaled_tc:
                s.peer_signaled_tc = tc
                for changed in self.registry.update():
                    self._log_cc(changed, now)
        self._process_chunks(s, pkt, dgram, now)

    def _process_chunks(self, s: Session, pkt: wire.Packet,
                        dgram: netsim.Datagram, now: int) -> None:
        touched: list[flows_mod.RecvFlow] = []
        acked = 0
        lost = 0
        losses = 0
        saw_ack = False
        for chunk in pkt.chunks:
            if isinstance(chunk, wire.HandshakeChunk):
                self._on_handshake_chunk(s, chunk, dgram, now)
            elif isinstance(chunk, wire.DataChunk):
                if s.state != S_OPEN:
                    continue
                rf = s.recv_flows.get(chunk.flow_id)
                if rf is None:
                    rf = flows_mod.RecvFlow(chunk.flow_id,
                                            self.params.rcv_buffer_size,
                                            chunk.time_critical)
                    s.recv_flows[chunk.flow_id] = rf
                rf.on_data_chunk(chunk, now)
                if rf not in touched:
                    touched.append(rf)
            elif isinstance(chunk, wire.AckChunk):
                sf = s.send_flows.get(chunk.flow_id)
                if sf is None:
                    self.stale_acks += 1
                    continue
                saw_ack = True
                res = sf.on_ack(chunk, now)
                acked += res.acked_bytes
                lost += res.lost_bytes
                losses += res.losses_detected
            elif isinstance(chunk, wire.CloseChunk):
                self._close_session(s, now, notify=True)
                return
        ack_chunks = []
        for rf in touched:
            ack = rf.end_of_packet(now)
            if ack is not None:
                ack_chunks.append(ack)
                self._cancel_delack(s, rf)
            elif rf.ack_pending():
                self._arm_delack(s, rf, now)
        if ack_chunks:
            self._send_packet(s, s.peer_sid, ack_chunks, s.peer_address, now)
        for rf in touched:
            if rf.has_ready() and s.app is not None:
                s.app.data_notification(s, rf.flow_id, now)
        if saw_ack:
            # Even a pure window update (nothing newly acked) may unblock the
            # flow-control gate, so always retry transmission after an ack.
            s.cc.remove_from_flight(lost)
            if acked:
                s.cc.on_ack_progress(acked, now)
                s.rto_backoff = 1
            if losses:
                s.cc.on_loss_event(now)
            if acked or lost:
                self._rearm_rto(s, now)
                self._log_cc(s, now)
            self._update_tc_active(s, now)
            self.transmit_opportunity(s, now)

    # ---------------------------------------------------------------- timers

    def _arm_delack(self, s: Session, rf: flows_mod.RecvFlow, now: int) -> None:
        key = (s.local_sid, rf.flow_id)
        if key in self._delack:
            return
        self._delack[key] = self.sim.after(
            self.params.delayed_ack_us, self.host.node_id, netsim.KIND_TIMER,
            lambda t: self._on_delack(s, rf, t), f"delack {s.label}/{rf.flow_id}")

    def _cancel_delack(self, s: Session, rf: flows_mod.RecvFlow) -> None:
        ev = self._delack.pop((s.local_sid, rf.flow_id), None)
        if ev is not None:
            ev.cancel()

    def _on_delack(self, s: Session, rf: flows_mod.RecvFlow, now: int) -> None:
        self._delack.pop((s.local_sid, rf.flow_id), None)
        if s.state != S_OPEN or not rf.ack_pending():
            return
        self._send_packet(s, s.peer_sid, [rf.make_ack(now)], s.peer_address, now)

    def _rearm_rto(self, s: Session, now: int) -> None:
        if s.rto_timer is not None:
            s.rto_timer.cancel()
            s.rto_timer = None
            s.rto_deadline = None
        if not s.in_flight():
            return
        deadline = now + s.rto_us()
        s.rto_deadline = deadline
        s.rto_timer = self.sim.schedule(
            deadline, self.host.node_id, netsim.KIND_TIMER,
            lambda t: self._on_rto(s, t), f"rto {s.label}")

    def _on_rto(self, s: Session, now: int) -> None:
        s.rto_timer = None
        s.rto_deadline = None
        if s.state != S_OPEN or not s.in_flight():
            return
        s.rto_fires += 1
        for f in s.send_flows.values():
            f.force_retransmit_all()
        s.cc.on_timeout()
        s.cc.reset_flight()
        s.rto_backoff *= 2
        self._rearm_rto(s, now)
        self._log_cc(s, now)
        self.transmit_opportunity(s, now)

    # ------------------------------------------------------------- transmit

    def send_message(self, s: Session, flow_id: int, payload: bytes,
                     time_critical: bool, now: int) -> None:
        f = s.send_flows[flow_id]
        f.enqueue_message(flows_mod.Message(payload, time_critical, flow_id))
        self._update_tc_active(s, now)
        self.transmit_opportunity(s, now)

    def _update_tc_active(self, s: Session, now: int) -> None:
        active = any(f.time_critical and f.has_pending()
                     for f in s.send_flows.values())
        if active != s.tc_active:
            self.registry.set_time_critical(s, active)
            for changed in self.registry.update():
                self._log_cc(changed, now)

    def transmit_opportunity(self, s: Session, now: int) -> int:
        """Send as many packets as the window, flow control and queues allow."""
        if s.state != S_OPEN:
            return 0
        sent = 0
        while s.cc.has_room():
            payload_budget = int(s.cc.cwnd) - s.cc.flight_size
            if payload_budget <= 0:
                break
            chunks = flows_mod.fill_packet(s, self.params.max_segment_size,
                                           payload_budget, now)
            if not chunks:
                break
            payload_bytes = sum(len(c.payload) for c in chunks)
            assert s.cc.flight_size <= s.cc.cwnd, "window gate violated at send time"
            s.cc.add_to_flight(payload_bytes)
            self._send_packet(s, s.peer_sid, chunks, s.peer_address, now)
            s.data_packets_out += 1
            if s.last_fill_was_full:
                s.full_packets_out += 1
                s.full_packet_chunks += len(chunks)
            if s.rto_timer is None:
                self._rearm_rto(s, now)
            sent += 1
        if sent:
            self._log_cc(s, now)
        return sent

    def _send_packet(self, s: Session, sid: Optional[int], chunks: list,
                     dst: tuple[str, int], now: int, established: bool = True) -> None:
        flags = wire.FLAG_ESTABLISHED if established else 0
        if s.tc_active:
            flags |= wire.FLAG_TIME_CRITICAL
        pkt = wire.Packet(sid if sid is not None else HANDSHAKE_SID, flags,
                          timestamp=(now // 1000) & 0xFFFF,
                          ts_echo=s.last_peer_ts,
                          chunks=chunks)
        buf = wire.encode(pkt, max_size=self.params.max_segment_size)
        s.packets_out += 1
        self.host.send(netsim.Datagram((self.host.node_id, self.local_port), dst, buf), now)

    # ----------------------------------------------------------- app surface

    def read_flow(self, s: Session, flow_id: int,
                  max_bytes: Optional[int] = None) -> list[flows_mod.Message]:
        rf = s.recv_flows.get(flow_id)
        if rf is None:
            return []
        msgs = rf.app_read(max_bytes)
        if msgs and rf.window_update_due(self.params.chunk_capacity) and s.state == S_OPEN:
            self._send_packet(s, s.peer_sid, [rf.make_ack(self.sim.now)],
                              s.peer_address, self.sim.now)
        return msgs

    def close_session(self, s: Session, now: int) -> None:
        if s.state == S_OPEN:
            self._send_packet(s, s.peer_sid, [wire.CloseChunk()], s.peer_address, now)
        self._close_session(s, now, notify=False)

    def _close_session(self, s: Session, now: int, notify: bool) -> None:
        if s.state == S_CLOSED:
            return
        s.state = S_CLOSED
        self.registry.remove(s)
        if notify and s.app is not None and hasattr(s.app, "session_closed"):
            s.app.session_closed(s, now)

    def migrate(self, new_port: int, now: int) -> None:
        """Rebind to a different local port; the peer learns the new address
        from the source of the next packets it receives (address mobility)."""
        self.host.rebind(self.local_port, new_port)
        self.local_port = new_port

    # ------------------------------------------------------------ reporting

    def _log_cc(self, s: Session, now: int) -> None:
        self.cwnd_log.append((now, self.host.node_id, s.label,
                              int(s.cc.cwnd), s.cc.flight_size, s.cc.mode))
