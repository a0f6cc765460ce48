"""Experiment harness: scenario execution, validation presets, fairness and
window-trace analysis, CSV output.

Presets (each a family of self-contained config texts):

  bottleneck-basic        one flow over the 10 Mbit/20 ms bottleneck with
                          background traffic; the determinism reference.
  bdp-sweep               one-way delays 0/10/25/50/100 ms on a fast link with
                          a 64 KiB receive buffer: flow control against the
                          bandwidth-delay product.
  fairness-simultaneous   two sessions sharing the bottleneck, same start.
  fairness-staggered      second session starts 10 s later.
  bundling-sweep          message sizes 50..1450 B at saturation.
  loss-sweep              bottleneck loss rates 0..5 %.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

from .app import FlowStats
from .config import ConfigError, ScenarioConfig, parse_config
from .netsim import ceil_div
from .topology import SimBundle, build_bottleneck

RESULTS_HEADER = ("scenario,seed,host,app,flow_id,direction,msgs_sent,msgs_recv,"
                  "bytes_sent,bytes_recv,retransmissions,start_us,end_us,goodput_bps")
CWND_HEADER = "time_us,host,session,cwnd_bytes,flight_bytes,mode"


@dataclass
class ResultRow:
    scenario: str
    seed: int
    host: str
    app: int
    flow_id: int
    direction: str
    msgs_sent: int
    msgs_recv: int
    bytes_sent: int
    bytes_recv: int
    retransmissions: int
    start_us: int
    end_us: int
    goodput_bps: float

    def as_csv(self) -> str:
        return (f"{self.scenario},{self.seed},{self.host},{self.app},{self.flow_id},"
                f"{self.direction},{self.msgs_sent},{self.msgs_recv},{self.bytes_sent},"
                f"{self.bytes_recv},{self.retransmissions},{self.start_us},"
                f"{self.end_us},{self.goodput_bps:.3f}")


@dataclass
class RunResult:
    scenario: str
    seed: int
    cfg: ScenarioConfig
    bundle: SimBundle
    rows: list[ResultRow] = field(default_factory=list)
    flow_stats: list[FlowStats] = field(default_factory=list)
    cwnd_series: list[tuple[int, str, str, int, int, str]] = field(default_factory=list)
    window_bytes: dict[tuple[str, int, int, int], int] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def stats(self, host: str, epd: int, flow_id: int, direction: str) -> FlowStats:
        for st in self.flow_stats:
            if (st.host, st.app_epd, st.flow_id, st.direction) == (host, epd, flow_id,
                                                                   direction):
                return st
        raise KeyError((host, epd, flow_id, direction))

    def window_rate_bps(self, host: str, epd: int, flow_id: int, probe_us: int,
                        until_us: Optional[int] = None) -> float:
        """Delivered-payload rate between a probe snapshot and end of run."""
        end = until_us if until_us is not None else self.cfg.duration_us
        start_bytes = self.window_bytes.get((host, epd, flow_id, probe_us), 0)
        final = self.stats(host, epd, flow_id, "recv").bytes
        span = end - probe_us
        return (final - start_bytes) * 8 * 1_000_000 / span if span > 0 else 0.0


def compute_fairness(rates: list[float]) -> float:
    """Jain's index (sum x)^2 / (n * sum x^2) over per-flow rates."""
    if not rates:
        raise ValueError("fairness needs at least one rate")
    total = sum(rates)
    squares = sum(r * r for r in rates)
    if squares == 0:
        return 1.0
    return total * total / (len(rates) * squares)


def sawtooth_drops(series, session_label: Optional[str] = None) -> list[tuple[int, float]]:
    """Find window collapses: samples where cwnd fell after prior growth.

    Returns (time_us, drop_ratio) pairs; ratio is post/pre collapse.
    """
    drops = []
    last: dict[str, int] = {}
    grew: dict[str, bool] = {}
    for time_us, _host, label, cwnd, _flight, _mode in series:
        if session_label is not None and label != session_label:
            continue
        prev = last.get(label)
        if prev is not None:
            if cwnd > prev:
                grew[label] = True
            elif cwnd < prev and grew.get(label):
                drops.append((time_us, cwnd / prev))
                grew[label] = False
        last[label] = cwnd
    return drops


def bdp_bound_bps(link_bps: int, one_way_delay_us: int, rwnd_bytes: int,
                  segment_bytes: int = 1472) -> float:
    """min(link rate, rwnd/RTT); RTT = 2 * delay + 2 * serialization time."""
    ser_us = ceil_div(segment_bytes * 8 * 1_000_000, link_bps)
    rtt_us = 2 * one_way_delay_us + 2 * ser_us
    return min(float(link_bps), rwnd_bytes * 8 * 1_000_000 / rtt_us)


# --------------------------------------------------------------------- running


def execute(bundle: SimBundle, scenario_id: str) -> RunResult:
    """Run a built scenario to its configured duration and gather results."""
    cfg = bundle.cfg
    result = RunResult(scenario_id, cfg.seed, cfg, bundle)

    def probe(at_us: int):
        def snap(now: int):
            for app in bundle.apps:
                for flow_id, nbytes in app.recv_bytes_by_flow().items():
                    key = (app.host_id, app.config.local_epd, flow_id, at_us)
                    result.window_bytes[key] = nbytes
        bundle.sim.schedule(at_us, "harness", "app-tick", snap, f"probe@{at_us}")

    for t in cfg.probe_times_us:
        probe(t)

    bundle.sim.run_until(cfg.duration_us)

    for app in bundle.apps:
        for st in app.finalize():
            result.flow_stats.append(st)
            result.rows.append(ResultRow(
                scenario=scenario_id, seed=cfg.seed, host=st.host, app=st.app_epd,
                flow_id=st.flow_id, direction=st.direction,
                msgs_sent=st.msgs if st.direction == "send" else 0,
                msgs_recv=st.msgs if st.direction == "recv" else 0,
                bytes_sent=st.bytes if st.direction == "send" else 0,
                bytes_recv=st.bytes if st.direction == "recv" else 0,
                retransmissions=st.retransmissions if st.direction == "send" else 0,
                start_us=st.first_us or 0, end_us=st.last_us or 0,
                goodput_bps=st.goodput_bps))
    result.rows.sort(key=lambda r: (r.scenario, r.host, r.app, r.flow_id, r.direction))

    for engine in bundle.engines.values():
        result.cwnd_series.extend(engine.cwnd_log)
    result.cwnd_series.sort(key=lambda row: row[0])

    bn = bundle.bottleneck
    full_packets = sum(s.full_packets_out for e in bundle.engines.values()
                       for s in e.sessions.values())
    full_chunks = sum(s.full_packet_chunks for e in bundle.engines.values()
                      for s in e.sessions.values())
    result.summary = {
        "scenario": scenario_id,
        "seed": cfg.seed,
        "duration_us": cfg.duration_us,
        "bottleneck_utilization": (bn.bytes_delivered * 8 * 1_000_000
                                   / cfg.duration_us / bn.bandwidth_bps),
        "bottleneck_sent": bn.sent,
        "bottleneck_delivered": bn.delivered,
        "bottleneck_dropped": bn.dropped,
        "full_packets": full_packets,
        "mean_full_packet_chunks": (full_chunks / full_packets) if full_packets else 0.0,
        "handshakes_completed": sum(e.handshakes_completed
                                    for e in bundle.engines.values()),
        "sessions_failed": sum(e.sessions_failed for e in bundle.engines.values()),
        "mobility_events": sum(s.mobility_events for e in bundle.engines.values()
                               for s in e.sessions.values()),
        "rto_fires": sum(s.rto_fires for e in bundle.engines.values()
                         for s in e.sessions.values()),
        "decode_errors": sum(e.decode_errors for e in bundle.engines.values()),
        "unknown_session": sum(e.unknown_session for e in bundle.engines.values()),
    }
    return result


def run_config(text: str, overrides: Optional[dict[str, str]] = None,
               scenario_id: str = "run",
               trace: Optional[Callable[[str], None]] = None,
               prepare: Optional[Callable[[SimBundle], None]] = None) -> RunResult:
    """Parse, build and execute one scenario from config text."""
    cfg = parse_config(text, overrides)
    bundle = build_bottleneck(cfg, trace=trace)
    if prepare is not None:
        prepare(bundle)
    return execute(bundle, scenario_id)


# --------------------------------------------------------------------- presets


def _basic_config(seed: int = 1) -> str:
    return f"""
[scenario]
seed = {seed}
duration = 15s

[topology]
bottleneckBandwidth = 10Mbit
bottleneckDelay = 20ms
bottleneckQueue = 65536byte
background = 1

[host.1]
localPort = 4711

[host.2]
localPort = 2013

[app.1.0]
localEpd = 4712
remoteAddress = "host2"
remotePort = 2013
remoteEpd = 2014
flowsOutgoing = 1
flowPacketSize = "140byte"
flowSendInterval = "1000us"
flowNumPackets = "5000"
flowTimeCritical = "0"
flowId = "19"
readDelay = 0ms

[app.2.0]
localEpd = 2014
"""


def _bdp_config(delay_ms: int, seed: int) -> str:
    return f"""
[scenario]
seed = {seed}
duration = 12s
probeTimes = "2400ms"

[topology]
bottleneckBandwidth = 100Mbit
bottleneckDelay = {delay_ms}ms
bottleneckQueue = 131072byte

[host.1]
localPort = 4711

[host.2]
localPort = 2013
rcvBufferSize = 65536byte

[app.1.0]
localEpd = 4712
remoteAddress = "host2"
remotePort = 2013
remoteEpd = 2014
flowsOutgoing = 1
flowPacketSize = "1450byte"
flowSendInterval = "100us"
flowNumPackets = "1000000"
flowId = "19"
readDelay = 0ms

[app.2.0]
localEpd = 2014
"""


def _fairness_config(seed: int, stagger_us: int) -> str:
    start2 = f"startTime = {stagger_us}us" if stagger_us else ""
    return f"""
[scenario]
seed = {seed}
duration = 60s
probeTimes = "12s 40s"

[topology]
bottleneckBandwidth = 10Mbit
bottleneckDelay = 20ms
bottleneckQueue = 32768byte
background = 1
backgroundPacketSize = 500byte

[host.1]
localPort = 4711

[host.2]
localPort = 2013
rcvBufferSize = 524288byte

[host.3]
localPort = 4711

[host.4]
localPort = 2013
rcvBufferSize = 524288byte

[app.1.0]
localEpd = 100
remoteAddress = "host2"
remotePort = 2013
remoteEpd = 200
flowsOutgoing = 1
flowPacketSize = "1450byte"
flowSendInterval = "800us"
flowNumPackets = "1000000"
flowId = "1"

[app.2.0]
localEpd = 200

[app.3.0]
localEpd = 300
remoteAddress = "host4"
remotePort = 2013
remoteEpd = 400
flowsOutgoing = 1
flowPacketSize = "1450byte"
flowSendInterval = "800us"
flowNumPackets = "1000000"
flowId = "1"
{start2}

[app.4.0]
localEpd = 400
"""


def _bundling_config(size: int, seed: int) -> str:
    interval_us = max(10, size * 8 // 12)  # offered load ~12 Mbit/s
    return f"""
[scenario]
seed = {seed}
duration = 10s

[topology]
bottleneckBandwidth = 10Mbit
bottleneckDelay = 10ms
bottleneckQueue = 65536byte

[host.1]
localPort = 4711

[host.2]
localPort = 2013
rcvBufferSize = 524288byte

[app.1.0]
localEpd = 4712
remoteAddress = "host2"
remotePort = 2013
remoteEpd = 2014
flowsOutgoing = 1
flowPacketSize = "{size}byte"
flowSendInterval = "{interval_us}us"
flowNumPackets = "1000000"
flowId = "19"

[app.2.0]
localEpd = 2014
"""


def _loss_config(loss_pct: float, seed: int) -> str:
    return f"""
[scenario]
seed = {seed}
duration = 30s

[topology]
bottleneckBandwidth = 10Mbit
bottleneckDelay = 10ms
bottleneckQueue = 65536byte
bottleneckLoss = {loss_pct / 100.0}

[host.1]
localPort = 4711

[host.2]
localPort = 2013
rcvBufferSize = 262144byte

[app.1.0]
localEpd = 4712
remoteAddress = "host2"
remotePort = 2013
remoteEpd = 2014
flowsOutgoing = 1
flowPacketSize = "140byte"
flowSendInterval = "100us"
flowNumPackets = "10000"
flowId = "19"

[app.2.0]
localEpd = 2014
"""


BDP_DELAYS_MS = (0, 10, 25, 50, 100)
BUNDLING_SIZES = (50, 140, 500, 1000, 1450)
LOSS_RATES_PCT = (0.0, 0.1, 0.5, 1.0, 2.0, 5.0)
PRESET_NAMES = ("bottleneck-basic", "bdp-sweep", "fairness-simultaneous",
                "fairness-staggered", "bundling-sweep", "loss-sweep")


def preset_points(name: str, seed: int = 1) -> list[tuple[str, str]]:
    """-> [(scenario id, config text)], one entry per sweep point."""
    if name == "bottleneck-basic":
        return [("bottleneck-basic", _basic_config(seed))]
    if name == "bdp-sweep":
        return [(f"bdp-sweep/delay={d}ms", _bdp_config(d, seed)) for d in BDP_DELAYS_MS]
    if name == "fairness-simultaneous":
        return [("fairness-simultaneous", _fairness_config(seed, 0))]
    if name == "fairness-staggered":
        return [("fairness-staggered", _fairness_config(seed, 10_000_000))]
    if name == "bundling-sweep":
        return [(f"bundling-sweep/size={s}B", _bundling_config(s, seed))
                for s in BUNDLING_SIZES]
    if name == "loss-sweep":
        return [(f"loss-sweep/loss={p:g}pct", _loss_config(p, seed))
                for p in LOSS_RATES_PCT]
    raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")


def run_preset(name: str, seed: int = 1,
               overrides: Optional[dict[str, str]] = None,
               trace: Optional[Callable[[str], None]] = None) -> list[RunResult]:
    results = []
    for scenario_id, text in preset_points(name, seed):
        results.append(run_config(text, overrides, scenario_id, trace=trace))
    if name == "bdp-sweep":
        for res, delay_ms in zip(results, BDP_DELAYS_MS):
            topo = res.cfg.topology
            rwnd = res.cfg.hosts["host2"].rcv_buffer_size
            res.summary["bdp_theory_bps"] = bdp_bound_bps(
                topo.bottleneck_bandwidth_bps, delay_ms * 1000, rwnd)
    return results


# ----------------------------------------------------------------------- CSV


def results_csv(results: list[RunResult]) -> str:
    lines = [RESULTS_HEADER]
    for res in results:
        lines.extend(row.as_csv() for row in res.rows)
    return "\n".join(lines) + "\n"


def cwnd_csv(result: RunResult) -> str:
    lines = [CWND_HEADER]
    lines.extend(f"{t},{host},{label},{cwnd},{flight},{mode}"
                 for t, host, label, cwnd, flight, mode in result.cwnd_series)
    return "\n".join(lines) + "\n"


def _safe_name(scenario_id: str) -> str:
    return scenario_id.replace("/", "__").replace("=", "-")


def write_outputs(results: list[RunResult], out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    path = os.path.join(out_dir, "results.csv")
    with open(path, "w") as f:
        f.write(results_csv(results))
    written.append(path)
    for res in results:
        path = os.path.join(out_dir, f"cwnd__{_safe_name(res.scenario)}.csv")
        with open(path, "w") as f:
            f.write(cwnd_csv(res))
        written.append(path)
    return written


def summarize_results_csv(path: str) -> list[dict]:
    """Recompute per-scenario aggregates from a results.csv file."""
    with open(path) as f:
        reader = csv.DictReader(f)
        rows = list(reader)
    by_scenario: dict[str, list[dict]] = {}
    for row in rows:
        by_scenario.setdefault(row["scenario"], []).append(row)
    out = []
    for scenario, group in sorted(by_scenario.items()):
        recv = [r for r in group if r["direction"] == "recv"]
        rates = [float(r["goodput_bps"]) for r in recv]
        entry = {
            "scenario": scenario,
            "flows_recv": len(recv),
            "total_recv_goodput_bps": sum(rates),
            "jain_index": compute_fairness(rates) if rates else 0.0,
            "total_retransmissions": sum(int(r["retransmissions"]) for r in group),
        }
        out.append(entry)
    return out
