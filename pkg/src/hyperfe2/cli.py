"""Command line entry point.

``hyperfe2 {offline,online,study,validate} -c cfg.json [-o out/]``

Exit codes: 0 success, 1 input error, 2 solver failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, parse_config
from .pipeline import PipelineError, run_offline, run_online, run_study

EXIT_OK, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyperfe2", description="Reduced-order FE2 with hyper-integration")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("offline", "surrogate, clustering, training, POD and hyper-integration"),
                        ("online", "two-scale simulation"),
                        ("study", "hyper-integration convergence study"),
                        ("validate", "check a configuration and print it with defaults filled")]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("-c", "--config", required=True, help="JSON configuration file")
        s.add_argument("-o", "--output", help="output directory (overrides 'output')")
        s.add_argument("--mode", choices=["hf", "rom", "ecm", "eheim"])
        s.add_argument("--m-tilde", type=int, dest="m_tilde", help="overrides hyper.m_tilde")
        s.add_argument("--n-modes", type=int, dest="n_modes", help="overrides rom.n_modes")
        s.add_argument("--k", type=int, help="overrides sampling.k")
        s.add_argument("--seed", type=int, help="overrides sampling.seed")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args) -> dict:
    keys = {"output": "output", "mode": "mode", "m_tilde": "hyper.m_tilde", "n_modes": "rom.n_modes",
            "k": "sampling.k", "seed": "sampling.seed"}
    return {dotted: getattr(args, a) for a, dotted in keys.items() if getattr(args, a) is not None}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(args.config)
        ov = _overrides(args)
        if ov:
            cfg = cfg.with_overrides(**ov)
    except ConfigError as exc:
        for path, msg in exc.errors:
            print(f"config error at {path or '<root>'}: {msg}", file=sys.stderr)
        return EXIT_INPUT
    out = cfg.output
    if args.command == "validate":
        print(cfg.dumps())
        return EXIT_OK
    try:
        if args.command == "offline":
            art = run_offline(cfg, out)
            print(json.dumps(art.report, indent=2, sort_keys=True))
        elif args.command == "online":
            _, report = run_online(cfg, out)
            print(json.dumps(report, indent=2, sort_keys=True))
        else:
            rep = run_study(cfg, out, on_cell=lambda r: print(
                f"{r['criteria']:>12s}  m={r['m_tilde']:4d}  error={r['error']:.3e}  {r['status']}", flush=True))
            print(json.dumps(rep.summary(), indent=2, sort_keys=True, default=str))
    except PipelineError as exc:
        print(f"solver failure {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - anything else is a solver-side failure
        print(f"solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
