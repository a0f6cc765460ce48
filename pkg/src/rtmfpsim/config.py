"""Scenario configuration: a sectioned key-value text format.

Sections are `[scenario]`, `[topology]`, `[host.N]` and `[app.N.M]` (app M on
host N). Keys on hosts and apps mirror the protocol model's parameter names
(localPort, maxSegmentSize, rcvBufferSize, ccCwndInit, flowsOutgoing,
flowPacketSize, flowSendInterval, flowNumPackets, flowTimeCritical, flowId,
maxRuntime, readDelay, localEpd, remoteAddress, remotePort, remoteEpd).
Dimensioned values require a unit suffix (byte, us, ms, s; bandwidths use
bit/kbit/Mbit/Gbit). Per-flow values are space-separated lists, one entry per
outgoing flow. Sizes and intervals may be distributions:
constant(v) | uniform(a,b) | exponential(mean); a bare value means constant.

Example:

    [scenario]
    seed = 7
    duration = 30s

    [topology]
    bottleneckBandwidth = 10Mbit
    bottleneckDelay = 20ms

    [host.1]
    localPort = 4711

    [app.1.0]
    localEpd = 4712
    remoteAddress = "host2"
    remotePort = 2013
    remoteEpd = 2014
    flowsOutgoing = 2
    flowPacketSize = "140byte 140byte"
    flowSendInterval = "1000us 1000us"
    flowNumPackets = "500000 500000"
    flowTimeCritical = "1 1"
    flowId = "19 88"
    maxRuntime = 1800s
    readDelay = 0ms
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from .app import AppConfig, FlowSpec
from .netsim import Dist


class ConfigError(Exception):
    """Malformed configuration; message carries the offending line number."""


_TIME_UNITS = {"us": 1, "ms": 1_000, "s": 1_000_000}
_BW_UNITS = {"bit": 1, "kbit": 1_000, "Mbit": 1_000_000, "Gbit": 1_000_000_000}
_NUM_RE = re.compile(r"^(-?\d+(?:\.\d+)?)([A-Za-z]*)$")
_DIST_RE = re.compile(r"^(constant|uniform|exponential)\((.*)\)$")


@dataclass
class HostSpec:
    name: str
    local_port: int = 4711
    max_segment_size: int = 1472
    rcv_buffer_size: int = 65536
    cc_cwnd_init: int = 4380
    cc_mss: int = 1460
    side: Optional[str] = None  # "left" | "right"; derived when absent
    migrate_at_us: Optional[int] = None
    migrate_to_port: Optional[int] = None


@dataclass
class TopologySpec:
    bottleneck_bandwidth_bps: int = 10_000_000
    bottleneck_delay_us: int = 20_000
    bottleneck_queue_bytes: int = 65536
    bottleneck_loss: float = 0.0
    access_bandwidth_bps: int = 1_000_000_000
    access_delay_us: int = 0
    access_queue_bytes: int = 2 * 1024 * 1024
    background: bool = False
    background_load: float = 0.05
    background_size: Dist = field(default_factory=lambda: Dist.constant(1000))


@dataclass
class ScenarioConfig:
    seed: int = 1
    duration_us: int = 10_000_000
    probe_times_us: list[int] = field(default_factory=list)
    topology: TopologySpec = field(default_factory=TopologySpec)
    hosts: dict[str, HostSpec] = field(default_factory=dict)
    apps: list[tuple[str, AppConfig]] = field(default_factory=list)  # (host, app)


def parse_sections(text: str) -> dict[str, dict[str, tuple[str, int]]]:
    """Raw pass: section -> {key: (value string, line number)}."""
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    current: Optional[str] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value': {line!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if value.startswith('"') and value.endswith('"') and len(value) >= 2:
            value = value[1:-1]
        if key in sections[current]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{current}]")
        sections[current][key] = (value, lineno)
    return sections


def apply_overrides(sections: dict, overrides: dict[str, str]) -> None:
    """Apply `section.key=value` overrides onto the raw section map."""
    for dotted, value in overrides.items():
        section, _, key = dotted.rpartition(".")
        if not section or not key:
            raise ConfigError(f"override {dotted!r}: expected section.key=value")
        sections.setdefault(section, {})[key] = (value, 0)


def _scaled(value: str, units: dict[str, int], what: str, lineno: int) -> float:
    m = _NUM_RE.match(value)
    if not m:
        raise ConfigError(f"line {lineno}: cannot parse {what} value {value!r}")
    num, unit = m.group(1), m.group(2)
    if unit not in units:
        expected = "/".join(units)
        raise ConfigError(
            f"line {lineno}: {what} value {value!r} needs a unit ({expected})")
    return float(num) * units[unit]


def parse_time_us(value: str, lineno: int = 0) -> int:
    return int(round(_scaled(value, _TIME_UNITS, "time", lineno)))


def parse_bytes(value: str, lineno: int = 0) -> int:
    return int(round(_scaled(value, {"byte": 1}, "byte", lineno)))


def parse_bandwidth(value: str, lineno: int = 0) -> int:
    return int(round(_scaled(value, _BW_UNITS, "bandwidth", lineno)))


def _parse_plain(value: str, lineno: int, kind: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"line {lineno}: expected {kind}, got {value!r}")


def parse_dist(token: str, unit_parser, lineno: int = 0) -> Dist:
    """`140byte` / `constant(140byte)` / `uniform(a,b)` / `exponential(mean)`."""
    m = _DIST_RE.match(token)
    if m is None:
        return Dist.constant(unit_parser(token, lineno))
    kind, args_text = m.group(1), m.group(2)
    args = [a.strip() for a in args_text.split(",") if a.strip()]
    try:
        if kind == "constant":
            if len(args) != 1:
                raise ValueError("constant takes one argument")
            return Dist.constant(unit_parser(args[0], lineno))
        if kind == "uniform":
            if len(args) != 2:
                raise ValueError("uniform takes two arguments")
            return Dist.uniform(unit_parser(args[0], lineno), unit_parser(args[1], lineno))
        if len(args) != 1:
            raise ValueError("exponential takes one argument")
        return Dist.exponential(unit_parser(args[0], lineno))
    except (ValueError, ConfigError) as e:
        raise ConfigError(f"line {lineno}: bad distribution {token!r}: {e}")


def _take(sec: dict, key: str) -> Optional[tuple[str, int]]:
    return sec.pop(key, None)


def _reject_unknown(sec: dict, where: str) -> None:
    for key, (_, lineno) in sec.items():
        raise ConfigError(f"line {lineno}: unknown key {key!r} in [{where}]")


def _int_value(entry: tuple[str, int], what: str) -> int:
    value, lineno = entry
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"line {lineno}: {what} must be an integer, got {value!r}")


def build_config(sections: dict[str, dict[str, tuple[str, int]]]) -> ScenarioConfig:
    sections = {name: dict(body) for name, body in sections.items()}
    cfg = ScenarioConfig()

    sec = sections.pop("scenario", {})
    if (e := _take(sec, "seed")) is not None:
        cfg.seed = _int_value(e, "seed")
    if (e := _take(sec, "duration")) is not None:
        cfg.duration_us = parse_time_us(*e)
    if (e := _take(sec, "probeTimes")) is not None:
        value, lineno = e
        cfg.probe_times_us = [parse_time_us(tok, lineno) for tok in value.split()]
    _reject_unknown(sec, "scenario")

    topo = cfg.topology
    sec = sections.pop("topology", {})
    if (e := _take(sec, "bottleneckBandwidth")) is not None:
        topo.bottleneck_bandwidth_bps = parse_bandwidth(*e)
    if (e := _take(sec, "bottleneckDelay")) is not None:
        topo.bottleneck_delay_us = parse_time_us(*e)
    if (e := _take(sec, "bottleneckQueue")) is not None:
        topo.bottleneck_queue_bytes = parse_bytes(*e)
    if (e := _take(sec, "bottleneckLoss")) is not None:
        topo.bottleneck_loss = _parse_plain(e[0], e[1], "a probability")
        if not 0.0 <= topo.bottleneck_loss <= 1.0:
            raise ConfigError(f"line {e[1]}: bottleneckLoss must be within [0,1]")
    if (e := _take(sec, "accessBandwidth")) is not None:
        topo.access_bandwidth_bps = parse_bandwidth(*e)
    if (e := _take(sec, "accessDelay")) is not None:
        topo.access_delay_us = parse_time_us(*e)
    if (e := _take(sec, "accessQueue")) is not None:
        topo.access_queue_bytes = parse_bytes(*e)
    if (e := _take(sec, "background")) is not None:
        topo.background = bool(_int_value(e, "background"))
    if (e := _take(sec, "backgroundLoad")) is not None:
        topo.background_load = _parse_plain(e[0], e[1], "a load fraction")
        if not 0.0 < topo.background_load < 1.0:
            raise ConfigError(
                f"line {e[1]}: background load must stay strictly below capacity")
    if (e := _take(sec, "backgroundPacketSize")) is not None:
        topo.background_size = parse_dist(e[0], parse_bytes, e[1])
    _reject_unknown(sec, "topology")

    def _sort_key(name: str):
        return tuple((0, int(p)) if p.isdigit() else (1, p)
                     for p in name.split(".")[1:])

    host_names = sorted((n for n in sections if n.startswith("host.")), key=_sort_key)
    for name in host_names:
        sec = sections.pop(name)
        host = HostSpec(name="host" + name.split(".", 1)[1])
        if (e := _take(sec, "localPort")) is not None:
            host.local_port = _int_value(e, "localPort")
        if (e := _take(sec, "maxSegmentSize")) is not None:
            host.max_segment_size = parse_bytes(*e)
        if (e := _take(sec, "rcvBufferSize")) is not None:
            host.rcv_buffer_size = parse_bytes(*e)
        # Both spellings occur in the wild; canonical key is ccCwndInit.
        for spelling in ("ccCwndInit", "ccWndInit"):
            if (e := _take(sec, spelling)) is not None:
                host.cc_cwnd_init = parse_bytes(*e)
        if (e := _take(sec, "ccMss")) is not None:
            host.cc_mss = parse_bytes(*e)
        if (e := _take(sec, "side")) is not None:
            if e[0] not in ("left", "right"):
                raise ConfigError(f"line {e[1]}: side must be left or right")
            host.side = e[0]
        if (e := _take(sec, "migrateAt")) is not None:
            host.migrate_at_us = parse_time_us(*e)
        if (e := _take(sec, "migrateTo")) is not None:
            host.migrate_to_port = _int_value(e, "migrateTo")
        _reject_unknown(sec, name)
        cfg.hosts[host.name] = host

    app_names = sorted((n for n in sections if n.startswith("app.")), key=_sort_key)
    for name in app_names:
        sec = sections.pop(name)
        parts = name.split(".")
        if len(parts) != 3:
            lineno = next(iter(sec.values()))[1] if sec else 0
            raise ConfigError(f"line {lineno}: app sections are [app.<host>.<index>]")
        host_name = "host" + parts[1]
        if host_name not in cfg.hosts:
            lineno = next(iter(sec.values()))[1] if sec else 0
            raise ConfigError(f"line {lineno}: [{name}] references missing [host.{parts[1]}]")
        if (e := _take(sec, "localEpd")) is None:
            raise ConfigError(f"[{name}]: localEpd is required")
        app = AppConfig(local_epd=_int_value(e, "localEpd"))
        if (e := _take(sec, "remoteAddress")) is not None:
            app.remote_address = e[0]
        if (e := _take(sec, "remotePort")) is not None:
            app.remote_port = _int_value(e, "remotePort")
        if (e := _take(sec, "remoteEpd")) is not None:
            app.remote_epd = _int_value(e, "remoteEpd")
        if (e := _take(sec, "maxRuntime")) is not None:
            app.max_runtime_us = parse_time_us(*e)
        if (e := _take(sec, "readDelay")) is not None:
            app.read_delay_us = parse_time_us(*e)
        if (e := _take(sec, "startTime")) is not None:
            app.start_time_us = parse_time_us(*e)

        n_flows = 0
        if (e := _take(sec, "flowsOutgoing")) is not None:
            n_flows = _int_value(e, "flowsOutgoing")

        def flow_list(key: str, parser, required: bool):
            entry = _take(sec, key)
            if entry is None:
                if required and n_flows:
                    raise ConfigError(f"[{name}]: {key} is required when flowsOutgoing > 0")
                return None
            value, lineno = entry
            tokens = value.split()
            if len(tokens) != n_flows:
                raise ConfigError(
                    f"line {lineno}: {key} has {len(tokens)} entries, "
                    f"flowsOutgoing = {n_flows}")
            return [parser(tok, lineno) for tok in tokens]

        sizes = flow_list("flowPacketSize",
                          lambda tok, ln: parse_dist(tok, parse_bytes, ln), True)
        intervals = flow_list("flowSendInterval",
                              lambda tok, ln: parse_dist(tok, parse_time_us, ln), True)
        counts = flow_list("flowNumPackets",
                           lambda tok, ln: _int_value((tok, ln), "flowNumPackets"), True)
        tcs = flow_list("flowTimeCritical",
                        lambda tok, ln: bool(_int_value((tok, ln), "flowTimeCritical")),
                        False)
        ids = flow_list("flowId",
                        lambda tok, ln: _int_value((tok, ln), "flowId"), False)
        _reject_unknown(sec, name)
        for i in range(n_flows):
            app.flows.append(FlowSpec(
                flow_id=ids[i] if ids else i + 1,
                size_dist=sizes[i],
                interval_dist=intervals[i],
                num_packets=counts[i],
                time_critical=tcs[i] if tcs else False))
        try:
            app.validate()
        except ValueError as e:
            raise ConfigError(f"[{name}]: {e}")
        cfg.apps.append((host_name, app))

    for name in sections:
        raise ConfigError(f"unknown section [{name}]")

    _validate(cfg)
    return cfg


def _validate(cfg: ScenarioConfig) -> None:
    epds = [app.local_epd for _, app in cfg.apps]
    if len(set(epds)) != len(epds):
        raise ConfigError(f"localEpd values must be unique, got {epds}")
    for host_name, app in cfg.apps:
        if app.remote_address is None:
            continue
        remote = cfg.hosts.get(app.remote_address)
        if remote is None:
            raise ConfigError(
                f"app {app.local_epd}: remoteAddress {app.remote_address!r} "
                f"is not a configured host")
        if app.remote_port != remote.local_port:
            raise ConfigError(
                f"app {app.local_epd}: remotePort {app.remote_port} does not match "
                f"{remote.name} localPort {remote.local_port}")
    for host in cfg.hosts.values():
        if (host.migrate_at_us is None) != (host.migrate_to_port is None):
            raise ConfigError(f"{host.name}: migrateAt and migrateTo go together")
    if cfg.topology.bottleneck_queue_bytes < 1500:
        raise ConfigError("bottleneckQueue smaller than one MTU would drop everything")


def parse_config(text: str, overrides: Optional[dict[str, str]] = None) -> ScenarioConfig:
    sections = parse_sections(text)
    if overrides:
        apply_overrides(sections, overrides)
    return build_config(sections)
