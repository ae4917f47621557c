"""Command-line entry point: ``tile360 {validate,run,synth-traces}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiments


def _validate(args) -> int:
    diags = experiments.validate_config(args.config)
    for d in diags:
        print(d)
    if not diags:
        print("config OK")
    return 1 if any(d.level == "error" for d in diags) else 0


def _run(args) -> int:
    diags = experiments.validate_config(args.config)
    for d in diags:
        print(d, file=sys.stderr)
    if any(d.level == "error" for d in diags):
        return 1
    summary = experiments.run_suite(args.config, out_dir=args.out, seed=args.seed, jobs=args.jobs)
    for f in summary["failures"]:
        print(f"run {f['run_id']} failed: {f['error']}", file=sys.stderr)
    if summary["failures"]:
        return 2
    print(json.dumps({"runs": summary["runs"], "out": args.out,
                      "experiments": sorted(summary["experiments"])}))
    return 0


def _synth(args) -> int:
    paths = experiments.write_synthetic_traces(args.out, args.count, args.duration, args.mean, args.std,
                                               seed=args.seed, max_segment_s=args.max_segment)
    print(f"wrote {len(paths)} traces to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tile360", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a suite config without running it")
    p.add_argument("config")
    p.set_defaults(func=_validate)

    p = sub.add_parser("run", help="run every experiment of a suite config")
    p.add_argument("config")
    p.add_argument("--out", default="results", help="output directory (default: results)")
    p.add_argument("--seed", type=int, default=None, help="base seed (default: the config's, else 0)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=_run)

    p = sub.add_parser("synth-traces", help="write synthetic piecewise-constant throughput traces")
    p.add_argument("--out", required=True, help="directory for the CSV traces")
    p.add_argument("--count", type=int, default=40)
    p.add_argument("--duration", type=int, default=300, help="seconds per trace")
    p.add_argument("--mean", type=float, default=20.0, help="mean throughput in Mbps")
    p.add_argument("--std", type=float, default=6.0, help="standard deviation in Mbps")
    p.add_argument("--max-segment", type=int, default=8, help="longest constant stretch in seconds")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
