"""Command-line entry point for scenario runs."""
from __future__ import annotations

import argparse
import json
import sys

from . import harness


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voipqos",
        description="Closed-loop QoS control runs over a simulated VoIP path",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="execute one scenario run")
    run_p.add_argument(
        "--scenario",
        required=True,
        help="preset name or path to a scenario JSON file",
    )
    run_p.add_argument("--seed", type=int, default=0)
    run_p.add_argument(
        "--mode", choices=["calibrate", "control", "baseline"], default="control"
    )
    run_p.add_argument(
        "--learning",
        choices=["on", "off"],
        default=None,
        help="override the scenario's learning flag",
    )
    run_p.add_argument("--out", default=None, help="output directory for artifacts")
    presets_p = sub.add_parser("presets", help="list built-in scenario presets")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "presets":
        for name in sorted(harness.PRESETS):
            print(name)
        return 0
    try:
        scenario = harness.load_scenario(args.scenario)
    except harness.ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    learning = None if args.learning is None else args.learning == "on"
    artifacts = harness.run(
        scenario, seed=args.seed, mode=args.mode, learning=learning, out_dir=args.out
    )
    print(json.dumps(artifacts.summary, indent=2, sort_keys=True))
    if args.mode == "control" and not artifacts.summary.get("constraints_met", False):
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
