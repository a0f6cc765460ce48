"""Command line front end.

  rtmfpsim run --config FILE [--seed N] [--trace FILE] [--out DIR]
  rtmfpsim preset NAME [--seed N] [--override key=value ...] [--out DIR] [--trace FILE]
  rtmfpsim report --out DIR

Exit codes: 0 success, 1 configuration error, 2 runtime assertion failure.
"""

from __future__ import annotations

import argparse
import sys

from . import harness
from .config import ConfigError
from .netsim import SimulationError


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r}: expected key=value")
        overrides[key.strip()] = value.strip()
    return overrides


def _open_trace(path: str | None):
    if path is None:
        return None, None
    f = open(path, "w")
    return f, lambda line: f.write(line + "\n")


def _finish(results, out_dir: str | None) -> None:
    if out_dir:
        for path in harness.write_outputs(results, out_dir):
            print(f"wrote {path}")
    for res in results:
        s = res.summary
        print(f"{res.scenario}: seed={res.seed} "
              f"util={s['bottleneck_utilization']:.3f} "
              f"handshakes={s['handshakes_completed']} "
              f"rows={len(res.rows)}")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="rtmfpsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--trace", default=None)
    p_run.add_argument("--out", default=None)

    p_preset = sub.add_parser("preset", help="run a named validation preset")
    p_preset.add_argument("name", choices=harness.PRESET_NAMES)
    p_preset.add_argument("--seed", type=int, default=1)
    p_preset.add_argument("--override", action="append", default=[],
                          metavar="SECTION.KEY=VALUE")
    p_preset.add_argument("--trace", default=None)
    p_preset.add_argument("--out", default=None)

    p_report = sub.add_parser("report", help="summarize CSVs in an output directory")
    p_report.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    trace_file = None
    try:
        if args.command == "run":
            with open(args.config) as f:
                text = f.read()
            overrides = {}
            if args.seed is not None:
                overrides["scenario.seed"] = str(args.seed)
            trace_file, trace = _open_trace(args.trace)
            results = [harness.run_config(text, overrides, trace=trace)]
            _finish(results, args.out)
        elif args.command == "preset":
            overrides = _parse_overrides(args.override) or None
            trace_file, trace = _open_trace(args.trace)
            results = harness.run_preset(args.name, seed=args.seed,
                                         overrides=overrides, trace=trace)
            _finish(results, args.out)
        else:
            import os
            path = os.path.join(args.out, "results.csv")
            for entry in harness.summarize_results_csv(path):
                print(f"{entry['scenario']}: flows={entry['flows_recv']} "
                      f"goodput={entry['total_recv_goodput_bps']:.0f}bps "
                      f"jain={entry['jain_index']:.4f} "
                      f"retx={entry['total_retransmissions']}")
    except (ConfigError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (SimulationError, AssertionError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2
    finally:
        if trace_file is not None:
            trace_file.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
