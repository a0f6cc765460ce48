"""Configurable traffic application: endpoint registration, per-flow send
schedules driven by sampling distributions, delayed reads and statistics.

Each app is one endpoint. An app with a configured remote opens exactly one
session and drives its outgoing flows; every app can receive on flows that
appear on inbound sessions. Message payloads embed the flow id and a running
index so the receiving side can verify ordering, and both sides keep a
running SHA-256 over the payload stream for end-to-end integrity checks.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Optional

from . import netsim
from .engine import S_OPEN, RtmfpEngine, Session

_PATTERN = bytes(range(256))
_HEADER = struct.Struct("!IQ")

SIZE_CLAMP_MIN = 1
SIZE_CLAMP_MAX = 65536


def make_payload(flow_id: int, index: int, size: int) -> bytes:
    """Deterministic pseudo-payload; carries (flow_id, index) when it fits."""
    if size >= _HEADER.size:
        fill = size - _HEADER.size
        off = index % 256
        body = (_PATTERN * (fill // 256 + 2))[off:off + fill]
        return _HEADER.pack(flow_id & 0xFFFFFFFF, index) + body
    return _PATTERN[:size]


def parse_payload(payload: bytes) -> Optional[tuple[int, int]]:
    if len(payload) >= _HEADER.size:
        return _HEADER.unpack_from(payload, 0)
    return None


@dataclass
class FlowSpec:
    flow_id: int
    size_dist: netsim.Dist
    interval_dist: netsim.Dist
    num_packets: int
    time_critical: bool = False


@dataclass
class AppConfig:
    local_epd: int
    remote_address: Optional[str] = None
    remote_port: Optional[int] = None
    remote_epd: Optional[int] = None
    flows: list[FlowSpec] = field(default_factory=list)
    max_runtime_us: int = 1_800_000_000
    read_delay_us: int = 0
    start_time_us: int = 0

    def validate(self) -> None:
        if self.flows and self.remote_address is None:
            raise ValueError(f"app {self.local_epd}: outgoing flows need a remote")
        if self.remote_address is not None and (
                self.remote_port is None or self.remote_epd is None):
            raise ValueError(f"app {self.local_epd}: incomplete remote endpoint")
        ids = [f.flow_id for f in self.flows]
        if len(set(ids)) != len(ids):
            raise ValueError(f"app {self.local_epd}: duplicate flow ids {ids}")


@dataclass
class FlowStats:
    host: str
    app_epd: int
    flow_id: int
    direction: str  # "send" | "recv"
    msgs: int = 0
    bytes: int = 0
    first_us: Optional[int] = None
    last_us: Optional[int] = None
    retransmissions: int = 0
    digest: str = ""
    clamped_draws: int = 0
    order_violations: int = 0

    def touch(self, now: int) -> None:
        if self.first_us is None:
            self.first_us = now
        self.last_us = now

    @property
    def goodput_bps(self) -> float:
        if self.first_us is None or self.last_us is None or self.last_us <= self.first_us:
            return 0.0
        return self.bytes * 8 * 1_000_000 / (self.last_us - self.first_us)


class _RecvSide:
    def __init__(self, stats: FlowStats):
        self.stats = stats
        self.hasher = hashlib.sha256()
        self.expected_index = 0
        self.read_pending = False


class RtmfpApp:
    """Traffic source/sink bound to one EPD on one engine."""

    def __init__(self, sim: netsim.Simulator, engine: RtmfpEngine, config: AppConfig):
        config.validate()
        self.sim = sim
        self.engine = engine
        self.config = config
        self.host_id = engine.host.node_id
        engine.register_app(config.local_epd, self)
        self.session: Optional[Session] = None
        self.session_open_us: Optional[int] = None
        self.session_failures = 0
        self._started_us: Optional[int] = None
        self._sent_counts = [0] * len(config.flows)
        self._send_stats = [FlowStats(self.host_id, config.local_epd, fs.flow_id, "send")
                            for fs in config.flows]
        self._send_hashers = [hashlib.sha256() for _ in config.flows]
        self._recv: dict[int, _RecvSide] = {}
        self.reads_performed = 0
        rng_base = f"app:{self.host_id}:{config.local_epd}"
        self._size_rngs = [sim.stream(f"{rng_base}:flow:{fs.flow_id}:size")
                           for fs in config.flows]
        self._ival_rngs = [sim.stream(f"{rng_base}:flow:{fs.flow_id}:interval")
                           for fs in config.flows]

    # -------------------------------------------------------------- lifecycle

    def start(self, now: int) -> None:
        """Kick off the session open (registration happened at construction)."""
        self._started_us = now
        if self.config.remote_address is not None:
            self.engine.open_session(
                self.config.local_epd, self.config.remote_epd,
                [(self.config.remote_address, self.config.remote_port)], now)

    def session_opened(self, session: Session, now: int) -> None:
        if session.role != "initiator":
            return
        self.session = session
        self.session_open_us = now
        for i, fs in enumerate(self.config.flows):
            session.create_send_flow(fs.flow_id, fs.time_critical)
            self._schedule_tick(i, now)

    def session_failed(self, session: Session, now: int) -> None:
        self.session_failures += 1

    # ---------------------------------------------------------------- sending

    def _schedule_tick(self, i: int, at: int) -> None:
        fs = self.config.flows[i]
        self.sim.schedule(at, self.host_id, netsim.KIND_APP_TICK,
                          lambda t: self.send_tick(i, t),
                          f"epd={self.config.local_epd} flow={fs.flow_id}")

    def send_tick(self, i: int, now: int) -> None:
        fs = self.config.flows[i]
        if self.session is None or self.session.state != S_OPEN:
            return
        if self._sent_counts[i] >= fs.num_packets:
            return
        if self._started_us is not None and now - self._started_us >= self.config.max_runtime_us:
            return
        st = self._send_stats[i]
        size = int(round(fs.size_dist.sample(self._size_rngs[i])))
        if size < SIZE_CLAMP_MIN or size > SIZE_CLAMP_MAX:
            size = min(max(size, SIZE_CLAMP_MIN), SIZE_CLAMP_MAX)
            st.clamped_draws += 1
        payload = make_payload(fs.flow_id, self._sent_counts[i], size)
        self._sent_counts[i] += 1
        st.msgs += 1
        st.bytes += len(payload)
        st.touch(now)
        self._send_hashers[i].update(payload)
        self.engine.send_message(self.session, fs.flow_id, payload,
                                 fs.time_critical, now)
        if self._sent_counts[i] < fs.num_packets:
            interval = max(0, int(round(fs.interval_dist.sample(self._ival_rngs[i]))))
            self._schedule_tick(i, now + interval)

    # -------------------------------------------------------------- receiving

    def _recv_side(self, flow_id: int) -> _RecvSide:
        side = self._recv.get(flow_id)
        if side is None:
            side = _RecvSide(FlowStats(self.host_id, self.config.local_epd,
                                       flow_id, "recv"))
            self._recv[flow_id] = side
        return side

    def data_notification(self, session: Session, flow_id: int, now: int) -> None:
        side = self._recv_side(flow_id)
        if side.read_pending:
            return
        side.read_pending = True
        self.sim.after(self.config.read_delay_us, self.host_id, netsim.KIND_APP_TICK,
                       lambda t: self._do_read(session, flow_id, t),
                       f"read epd={self.config.local_epd} flow={flow_id}")

    def _do_read(self, session: Session, flow_id: int, now: int) -> None:
        side = self._recv_side(flow_id)
        side.read_pending = False
        msgs = self.engine.read_flow(session, flow_id)
        if not msgs:
            return
        self.reads_performed += 1
        st = side.stats
        for m in msgs:
            st.msgs += 1
            st.bytes += len(m.payload)
            st.touch(now)
            side.hasher.update(m.payload)
            parsed = parse_payload(m.payload)
            if parsed is not None:
                fid, idx = parsed
                if fid != flow_id or idx != side.expected_index:
                    st.order_violations += 1
                side.expected_index = idx + 1

    # -------------------------------------------------------------- reporting

    def recv_bytes_by_flow(self) -> dict[int, int]:
        """Cumulative payload bytes delivered to the app, per receive flow."""
        return {flow_id: side.stats.bytes for flow_id, side in self._recv.items()}

    def finalize(self) -> list[FlowStats]:
        """Emit statistics for every configured send flow and touched recv flow."""
        rows = []
        for i, st in enumerate(self._send_stats):
            st.digest = self._send_hashers[i].hexdigest()
            if self.session is not None:
                f = self.session.send_flows.get(st.flow_id)
                if f is not None:
                    st.retransmissions = f.retransmissions
            rows.append(st)
        for flow_id, side in self._recv.items():
            side.stats.digest = side.hasher.hexdigest()
            rows.append(side.stats)
        return rows
