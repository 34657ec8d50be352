"""Command line entry point: ``risnoma run | validate | presets``.

Exit codes: 0 success, 1 invalid preset, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .channel_model import ConfigError
from .experiment import list_presets, load_preset, run_experiment, validate, write_csv

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="risnoma", description="BER experiments for RIS-assisted uplink NOMA")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a preset file or bundled preset name")
    run.add_argument("preset")
    run.add_argument("--mode", choices=["analytic", "mc", "both"])
    run.add_argument("--runs", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="CSV path (default: stdout)")
    run.add_argument("--pa", choices=["on", "off"])
    run.add_argument("--workers", type=int)

    val = sub.add_parser("validate", help="check a preset without running it")
    val.add_argument("preset")

    sub.add_parser("presets", help="list bundled presets")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "presets":
        for name in list_presets():
            print(name)
        return EXIT_OK

    try:
        preset = validate(args.preset) if args.command == "validate" else load_preset(args.preset)
    except (ConfigError, OSError) as exc:
        print(f"invalid preset: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.command == "validate":
        print(f"ok: {preset.name} ({len(preset.sweep)} sweep points, scenarios {', '.join(preset.scenarios)})")
        return EXIT_OK

    pa = None if args.pa is None else args.pa == "on"
    try:
        result = run_experiment(preset, mode=args.mode, runs=args.runs, seed=args.seed, pa=pa, workers=args.workers)
    except ConfigError as exc:
        print(f"invalid preset: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    text = write_csv(result, args.out)
    if args.out is None:
        sys.stdout.write(text)
    if result.failed_points:
        print(f"{result.failed_points} rows failed; see the note column", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
