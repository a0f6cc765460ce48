import os

import pytest

from rtmfpsim import harness
from rtmfpsim.config import ConfigError, parse_config
from rtmfpsim.harness import (bdp_bound_bps, compute_fairness, preset_points,
                              run_preset, sawtooth_drops,
                              summarize_results_csv, write_outputs)
from rtmfpsim.topology import build_bottleneck


# ----------------------------------------------------------------- fairness


def test_jain_equal_rates_is_one():
    assert compute_fairness([5.0, 5.0]) == 1.0


def test_jain_one_idle_flow_is_half():
    assert compute_fairness([5.0, 0.0]) == 0.5


def test_jain_three_to_one_is_point_eight():
    assert compute_fairness([3.0, 1.0]) == pytest.approx(0.8)  # 16 / (2 * 10)


def test_jain_needs_flows():
    with pytest.raises(ValueError):
        compute_fairness([])


# ----------------------------------------------------------------- topology


def test_build_dumbbell_shapes_routes():
    cfg = parse_config(harness._fairness_config(seed=1, stagger_us=0))
    bundle = build_bottleneck(cfg)
    assert set(bundle.hosts) >= {"host1", "host2", "host3", "host4"}
    # Initiators sit left, receivers right; cross traffic uses the bottleneck.
    rl, rr = bundle.routers["router.l"], bundle.routers["router.r"]
    assert rl.routes["host2"] is bundle.links["bottleneck:lr"]
    assert rr.routes["host1"] is bundle.links["bottleneck:rl"]
    assert rl.routes["host1"] is bundle.links["access:host1:down"]
    assert bundle.background is not None  # enabled in the fairness preset


def test_background_offered_load_is_five_percent():
    cfg = parse_config(harness._fairness_config(seed=3, stagger_us=0))
    bundle = build_bottleneck(cfg)
    bundle.sim.run_until(cfg.duration_us)
    rate = bundle.background.bytes_sent * 8 * 1_000_000 / cfg.duration_us
    assert rate == pytest.approx(0.05 * cfg.topology.bottleneck_bandwidth_bps,
                                 rel=0.06)


def test_background_disabled_leaves_only_protocol_traffic():
    res = run_preset("bottleneck-basic", seed=2,
                     overrides={"topology.background": "0"})[0]
    assert res.bundle.background is None
    lr = res.bundle.links["bottleneck:lr"]
    protocol_bytes = sum(s.packets_out for e in res.bundle.engines.values()
                         for s in e.sessions.values())
    assert lr.sent <= protocol_bytes  # nothing else ever crossed left-to-right


def test_side_override_controls_placement():
    text = harness._basic_config(1).replace("[host.2]\nlocalPort = 2013",
                                            "[host.2]\nlocalPort = 2013\nside = left")
    cfg = parse_config(text)
    bundle = build_bottleneck(cfg)
    assert bundle.routers["router.l"].routes["host2"].name == "access:host2:down"


# ------------------------------------------------------------------ presets


def test_unknown_preset_is_an_error():
    with pytest.raises(ConfigError):
        preset_points("warp-speed")


def test_every_preset_parses_and_names_points():
    for name in harness.PRESET_NAMES:
        points = preset_points(name, seed=1)
        assert points
        for scenario_id, text in points:
            cfg = parse_config(text)
            assert cfg.duration_us > 0
            assert scenario_id.startswith(name)


def test_preset_emits_one_row_per_flow_direction():
    res = run_preset("bottleneck-basic", seed=5)[0]
    assert len(res.rows) == 2  # one send row, one recv row for the single flow
    directions = {(r.host, r.direction) for r in res.rows}
    assert directions == {("host1", "send"), ("host2", "recv")}


def test_bdp_bound_formula():
    # 100 Mbit/s, 100 ms one-way, 64 KiB receive buffer: the window limits.
    bound = bdp_bound_bps(100_000_000, 100_000, 65536)
    assert bound == pytest.approx(65536 * 8 / 0.200236, rel=1e-6)
    # At zero delay the link itself limits.
    assert bdp_bound_bps(100_000_000, 0, 65536) == 100_000_000.0


def test_overrides_reach_the_simulation():
    res = run_preset("bottleneck-basic", seed=3,
                     overrides={"scenario.duration": "2s",
                                "app.1.0.flowNumPackets": "100"})[0]
    assert res.cfg.duration_us == 2_000_000
    assert res.stats("host1", 4712, 19, "send").msgs == 100


# ---------------------------------------------------------------- sawtooth


def test_sawtooth_detector_finds_multiplicative_drops():
    series = [
        (0, "h", "s", 10000, 0, "normal"),
        (1, "h", "s", 12000, 0, "normal"),
        (2, "h", "s", 6000, 0, "normal"),   # drop 0.5 after growth
        (3, "h", "s", 7000, 0, "normal"),
        (4, "h", "s", 7000, 0, "normal"),   # flat: not a drop
        (5, "h", "s", 3500, 0, "normal"),   # drop 0.5 after growth
        (6, "h", "s", 3000, 0, "normal"),   # second fall without growth: ignored
    ]
    drops = sawtooth_drops(series)
    assert [(t, round(r, 3)) for t, r in drops] == [(2, 0.5), (5, 0.5)]


# --------------------------------------------------------------------- CSV


def test_results_csv_schema_and_determinism(tmp_path):
    res1 = run_preset("bottleneck-basic", seed=4)
    res2 = run_preset("bottleneck-basic", seed=4)
    csv1 = harness.results_csv(res1)
    csv2 = harness.results_csv(res2)
    assert csv1 == csv2
    header = csv1.splitlines()[0]
    assert header == ("scenario,seed,host,app,flow_id,direction,msgs_sent,msgs_recv,"
                      "bytes_sent,bytes_recv,retransmissions,start_us,end_us,goodput_bps")
    assert harness.cwnd_csv(res1[0]) == harness.cwnd_csv(res2[0])
    assert harness.cwnd_csv(res1[0]).splitlines()[0] == \
        "time_us,host,session,cwnd_bytes,flight_bytes,mode"


def test_write_outputs_and_report_roundtrip(tmp_path):
    results = run_preset("bottleneck-basic", seed=4)
    paths = write_outputs(results, str(tmp_path))
    assert os.path.basename(paths[0]) == "results.csv"
    entries = summarize_results_csv(paths[0])
    assert len(entries) == 1
    assert entries[0]["scenario"] == "bottleneck-basic"
    assert entries[0]["flows_recv"] == 1
    assert entries[0]["jain_index"] == 1.0


def test_rtt_floor_shows_in_handshake_timing():
    # 20 ms one-way delay: the four-way handshake needs two RTTs of 40 ms.
    res = run_preset("bottleneck-basic", seed=6)[0]
    app1 = res.bundle.apps[0]
    assert 80_000 <= app1.session_open_us <= 84_000


def test_cli_run_and_report(tmp_path, capsys):
    from rtmfpsim.cli import main
    cfg_path = tmp_path / "scenario.conf"
    cfg_path.write_text(harness._basic_config(9).replace(
        'flowNumPackets = "5000"', 'flowNumPackets = "200"'))
    out_dir = tmp_path / "out"
    assert main(["run", "--config", str(cfg_path), "--out", str(out_dir)]) == 0
    assert (out_dir / "results.csv").exists()
    assert main(["report", "--out", str(out_dir)]) == 0
    out = capsys.readouterr().out
    assert "jain" in out


def test_cli_config_error_exit_code(tmp_path):
    from rtmfpsim.cli import main
    bad = tmp_path / "bad.conf"
    bad.write_text("[scenario]\nseed = banana\n")
    assert main(["run", "--config", str(bad)]) == 1
    assert main(["run", "--config", str(tmp_path / "missing.conf")]) == 1


def test_cli_runtime_failure_exit_code(monkeypatch):
    from rtmfpsim import cli
    from rtmfpsim.netsim import SimulationError

    def explode(*args, **kwargs):
        raise SimulationError("event scheduled in the past")

    monkeypatch.setattr(cli.harness, "run_preset", explode)
    assert cli.main(["preset", "bottleneck-basic"]) == 2
