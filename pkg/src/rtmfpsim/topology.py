"""Dumbbell topology construction: hosts and routers joined by point-to-point
links, with an optional random UDP background sender crossing the bottleneck.

Hosts attach to their side's router over fast access links; the two routers
are joined by the configured bottleneck. Forwarding is static: routers map a
destination node id to the outgoing link.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from . import netsim
from .app import RtmfpApp
from .config import ConfigError, ScenarioConfig
from .engine import EngineParams, RtmfpEngine
from .cc import CcParams

BG_PORT = 9


class Host:
    """End system: a set of bound ports plus one uplink toward its router."""

    def __init__(self, node_id: str):
        self.node_id = node_id
        self.uplink: Optional[netsim.Link] = None
        self._ports: dict[int, Callable[[netsim.Datagram, int], None]] = {}
        self.unknown_port_drops = 0

    def bind(self, port: int, handler) -> None:
        if port in self._ports:
            raise ConfigError(f"{self.node_id}: port {port} already bound")
        self._ports[port] = handler

    def rebind(self, old_port: int, new_port: int) -> None:
        handler = self._ports.pop(old_port)
        self.bind(new_port, handler)

    def send(self, dgram: netsim.Datagram, now: int) -> None:
        self.uplink.send(dgram, now)

    def handle_datagram(self, dgram: netsim.Datagram, now: int) -> None:
        handler = self._ports.get(dgram.dst[1])
        if handler is None:
            self.unknown_port_drops += 1
            return
        handler(dgram, now)


class Router:
    """Static forwarder: destination node id -> outgoing link."""

    def __init__(self, node_id: str):
        self.node_id = node_id
        self.routes: dict[str, netsim.Link] = {}
        self.no_route_drops = 0

    def handle_datagram(self, dgram: netsim.Datagram, now: int) -> None:
        link = self.routes.get(dgram.dst[0])
        if link is None:
            self.no_route_drops += 1
            return
        link.send(dgram, now)


class BackgroundSender:
    """Random UDP source: exponential inter-send times, configurable sizes."""

    def __init__(self, sim: netsim.Simulator, host: Host, dst: tuple[str, int],
                 size_dist: netsim.Dist, mean_interval_us: float):
        self.sim = sim
        self.host = host
        self.dst = dst
        self.size_dist = size_dist
        self.interval_dist = netsim.Dist.exponential(mean_interval_us)
        self._size_rng = sim.stream(f"bg:{host.node_id}:size")
        self._ival_rng = sim.stream(f"bg:{host.node_id}:interval")
        self.packets_sent = 0
        self.bytes_sent = 0
        host.bind(BG_PORT, lambda d, t: None)
        sim.schedule(0, host.node_id, netsim.KIND_APP_TICK,
                     self._tick, "background start")

    def _tick(self, now: int) -> None:
        size = int(round(self.size_dist.sample(self._size_rng)))
        size = min(max(size, 28), 1472)
        payload = b"\x00" * size
        self.host.send(netsim.Datagram((self.host.node_id, BG_PORT),
                                       self.dst, payload), now)
        self.packets_sent += 1
        self.bytes_sent += size
        delay = max(1, int(round(self.interval_dist.sample(self._ival_rng))))
        self.sim.after(delay, self.host.node_id, netsim.KIND_APP_TICK,
                       self._tick, "background send")


class BackgroundSink:
    def __init__(self, host: Host):
        self.packets = 0
        self.bytes = 0
        host.bind(BG_PORT, self._on_datagram)

    def _on_datagram(self, dgram: netsim.Datagram, now: int) -> None:
        self.packets += 1
        self.bytes += dgram.size


@dataclass
class SimBundle:
    """Everything a built scenario consists of, pre-run."""

    sim: netsim.Simulator
    cfg: ScenarioConfig
    hosts: dict[str, Host] = field(default_factory=dict)
    routers: dict[str, Router] = field(default_factory=dict)
    links: dict[str, netsim.Link] = field(default_factory=dict)
    engines: dict[str, RtmfpEngine] = field(default_factory=dict)
    apps: list[RtmfpApp] = field(default_factory=list)
    background: Optional[BackgroundSender] = None
    background_sink: Optional[BackgroundSink] = None

    @property
    def bottleneck(self) -> netsim.Link:
        return self.links["bottleneck:lr"]


def _host_sides(cfg: ScenarioConfig) -> dict[str, str]:
    """Initiating hosts go left, pure receivers right, unless `side` says so."""
    senders = {host for host, app in cfg.apps if app.remote_address is not None}
    sides = {}
    for name, spec in cfg.hosts.items():
        if spec.side is not None:
            sides[name] = spec.side
        else:
            sides[name] = "left" if name in senders else "right"
    return sides


def build_bottleneck(cfg: ScenarioConfig,
                     trace: Optional[Callable[[str], None]] = None) -> SimBundle:
    """Construct the dumbbell: hosts - router - router - hosts."""
    sim = netsim.Simulator(seed=cfg.seed, trace=trace)
    bundle = SimBundle(sim=sim, cfg=cfg)
    topo = cfg.topology

    rl = Router("router.l")
    rr = Router("router.r")
    bundle.routers = {"router.l": rl, "router.r": rr}

    bundle.links["bottleneck:lr"] = netsim.Link(
        sim, "bottleneck:lr", rr, topo.bottleneck_bandwidth_bps,
        topo.bottleneck_delay_us, topo.bottleneck_queue_bytes, topo.bottleneck_loss)
    bundle.links["bottleneck:rl"] = netsim.Link(
        sim, "bottleneck:rl", rl, topo.bottleneck_bandwidth_bps,
        topo.bottleneck_delay_us, topo.bottleneck_queue_bytes, topo.bottleneck_loss)

    sides = _host_sides(cfg)

    def attach_host(name: str) -> Host:
        host = Host(name)
        router = rl if sides.get(name, "left") == "left" else rr
        up = netsim.Link(sim, f"access:{name}:up", router, topo.access_bandwidth_bps,
                         topo.access_delay_us, topo.access_queue_bytes)
        down = netsim.Link(sim, f"access:{name}:down", host, topo.access_bandwidth_bps,
                           topo.access_delay_us, topo.access_queue_bytes)
        host.uplink = up
        bundle.links[f"access:{name}:up"] = up
        bundle.links[f"access:{name}:down"] = down
        router.routes[name] = down
        bundle.hosts[name] = host
        return host

    for name in cfg.hosts:
        attach_host(name)
    if topo.background:
        sides["bg.send"] = "left"
        sides["bg.sink"] = "right"
        bg_send = attach_host("bg.send")
        bg_sink = attach_host("bg.sink")

    # Anything not local to a router goes across the bottleneck.
    for name, side in sides.items():
        if side == "left":
            rr.routes.setdefault(name, bundle.links["bottleneck:rl"])
        else:
            rl.routes.setdefault(name, bundle.links["bottleneck:lr"])

    for name, spec in cfg.hosts.items():
        params = EngineParams(
            local_port=spec.local_port,
            max_segment_size=spec.max_segment_size,
            rcv_buffer_size=spec.rcv_buffer_size,
            cc_params=CcParams(cwnd_init=spec.cc_cwnd_init, mss=spec.cc_mss))
        engine = RtmfpEngine(sim, bundle.hosts[name], params)
        bundle.engines[name] = engine
        if spec.migrate_at_us is not None:
            sim.schedule(spec.migrate_at_us, name, netsim.KIND_APP_TICK,
                         lambda t, e=engine, p=spec.migrate_to_port: e.migrate(p, t),
                         f"migrate {name} -> port {spec.migrate_to_port}")

    for host_name, app_cfg in cfg.apps:
        app = RtmfpApp(sim, bundle.engines[host_name], app_cfg)
        bundle.apps.append(app)
        sim.schedule(app_cfg.start_time_us, host_name, netsim.KIND_APP_TICK,
                     lambda t, a=app: a.start(t), f"app start epd={app_cfg.local_epd}")

    if topo.background:
        mean_rate_bps = topo.background_load * topo.bottleneck_bandwidth_bps
        mean_size = topo.background_size.mean()
        mean_interval_us = mean_size * 8 * 1_000_000 / mean_rate_bps
        bundle.background = BackgroundSender(
            sim, bg_send, ("bg.sink", BG_PORT), topo.background_size, mean_interval_us)
        bundle.background_sink = BackgroundSink(bg_sink)

    return bundle
