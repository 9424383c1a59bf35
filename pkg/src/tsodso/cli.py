"""Command line entry point.

Exit codes: 0 success, 1 invalid input, 2 solver failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .experiment import build_history, parse_config, report, run_experiment, scenario_config
from .grid import load_system, write_system
from .learn import write_history
from .opf import SolverError
from .scenario import generate_scenario

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 1, 2


def _generate(args):
    system = generate_scenario(scenario_config(args.config), args.seed)
    write_system(system, args.out)
    print(f"wrote system with {len(system.distribution)} feeders and {system.horizon} hours to {args.out}")


def _history(args):
    system = load_system(args.system)
    if not 1 <= args.hours <= system.horizon:
        raise ValueError(f"--hours must be between 1 and {system.horizon}")
    hist = build_history(system, range(args.hours))
    write_history([hist[k] for k in sorted(hist)], args.out)
    print(f"wrote {sum(len(h) for h in hist.values())} history rows to {args.out}")


def _run(args):
    cfg = parse_config(args.config)
    scen = None if cfg.system else scenario_config(args.config)
    cfg = replace(cfg, out=args.out)
    _, summary, _ = run_experiment(cfg, scenario=scen)
    report(Path(args.out) / "reports.csv", args.out)
    cols = ["eta", "strategy", "delta_mean", "loss_mean", "tso_share", "dso_share"]
    print(summary[cols].to_string(index=False, float_format=lambda v: f"{v:.4g}"))


def _report(args):
    paths = report(args.input, args.out)
    print("wrote " + ", ".join(str(p) for p in paths.values()))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsodso", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic test system")
    g.add_argument("--config", required=True, help="key=value scenario file")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=_generate)

    h = sub.add_parser("history", help="solve the full-network market for the first N hours")
    h.add_argument("--system", required=True, help="system directory")
    h.add_argument("--hours", type=int, required=True)
    h.add_argument("--out", required=True, help="history CSV path")
    h.set_defaults(func=_history)

    r = sub.add_parser("run", help="run the impedance sweep over all strategies")
    r.add_argument("--config", required=True, help="key=value experiment file")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=_run)

    o = sub.add_parser("report", help="turn reports.csv into plot tables")
    o.add_argument("--in", dest="input", required=True, help="reports.csv path")
    o.add_argument("--out", required=True, help="output directory")
    o.set_defaults(func=_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, KeyError, OSError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
