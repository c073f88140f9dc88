"""Command-line front end: ``mvf run``, ``mvf sweep`` and ``mvf verify``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import PRESETS, Config, load_config
from .errors import ConfigError, InvalidInputError
from .runner import run_batch, run_sweep, write_outputs
from .verify import run_checks

logger = logging.getLogger(__name__)

DEFAULT_SEED = 42


def _load(config_path: Optional[str], preset: Optional[str], seed: Optional[int], n_runs: Optional[int]) -> Config:
    overrides: dict = {}
    if seed is not None:
        overrides.setdefault("experiment", {})["seed"] = seed
    if n_runs is not None:
        overrides.setdefault("experiment", {})["n_runs"] = n_runs
    return load_config(config_path, preset=preset, overrides=overrides)


def _report_config_error(exc: ConfigError) -> int:
    for line in exc.errors:
        print(f"config error: {line}", file=sys.stderr)
    return 2


def cmd_run(config_path: Optional[str], out_dir: str, seed: Optional[int] = DEFAULT_SEED,
            n_runs: Optional[int] = None, *, preset: Optional[str] = None, jobs: Optional[int] = None) -> int:
    """Run every (method, shock) cell and write CSVs plus ``summary.json``; 0 on success."""
    try:
        config = _load(config_path, preset, seed, n_runs)
    except ConfigError as exc:
        return _report_config_error(exc)
    results = run_batch(config, out_dir, jobs)
    summary = write_outputs(out_dir, results, config)
    failed = summary["failures"]
    for method, cells in summary["methods"].items():
        for shock, cell in cells.items():
            peak = cell["peak_dev"]
            rec = cell["recovery_censored"]
            print(f"{method:14s} {shock:15s} peak={peak if peak is None else f'{peak:.4f}'} "
                  f"recovery={rec if rec is None else f'{rec:.1f}'} failed={cell['n_failed']}")
    if failed:
        logger.warning("%d run(s) failed; see the log above", failed)
    return 1 if failed == len(results) else 0


def cmd_sweep(config_path: Optional[str], parameter: str, values: Sequence[str], out_dir: str = "out/sweep",
              seed: Optional[int] = DEFAULT_SEED, n_runs: Optional[int] = None, *,
              preset: Optional[str] = None, jobs: Optional[int] = None) -> int:
    """Run one batch per value of ``parameter`` and write a long-format ``sweep.csv``."""
    if not values:
        print("sweep error: at least one value is required", file=sys.stderr)
        return 2
    try:
        config = _load(config_path, preset, seed, n_runs)
        rows = run_sweep(config, parameter, list(values), out_dir, jobs)
    except ConfigError as exc:
        return _report_config_error(exc)
    except InvalidInputError as exc:
        print(f"sweep error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {len(rows)} rows to {Path(out_dir) / 'sweep.csv'}")
    return 0


def cmd_verify(config_path: Optional[str] = None, *, full: bool = False, jobs: Optional[int] = None,
               preset: Optional[str] = None) -> int:
    """Print a pass/fail table of the self-checks; 0 iff every check passes."""
    try:
        config = load_config(config_path, preset=preset or ("quick" if full else None))
    except ConfigError as exc:
        return _report_config_error(exc)
    results = run_checks(config, full=full, jobs=jobs)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return 0 if not failed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvf", description="Stablecoin reserve controller simulations.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_default: str) -> None:
        p.add_argument("--config", help="YAML config file (defaults apply to missing keys)")
        p.add_argument("--out", default=out_default, help="output directory (created if missing)")
        p.add_argument("--seed", type=int, help=f"base seed, run i uses seed + i (default {DEFAULT_SEED})")
        p.add_argument("--runs", type=int, help="runs per (method, shock) cell")
        p.add_argument("--jobs", type=int, default=os.cpu_count(), help="worker processes")
        p.add_argument("--preset", choices=sorted(PRESETS), help="named run-size preset")

    run = sub.add_parser("run", help="run all configured methods and shocks")
    common(run, "out")

    sweep = sub.add_parser("sweep", help="repeat a run over values of one parameter")
    common(sweep, "out/sweep")
    sweep.add_argument("parameter", help="dotted key such as experiment.adversary_fraction, or rho / shock_magnitude")
    sweep.add_argument("values", nargs="*", help="values to sweep")

    verify = sub.add_parser("verify", help="run the self-checks and print a pass/fail table")
    verify.add_argument("--config", help="YAML config file")
    verify.add_argument("--full", action="store_true", help="include the simulation-based checks")
    verify.add_argument("--jobs", type=int, default=os.cpu_count(), help="worker processes")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return cmd_run(args.config, args.out, args.seed, args.runs, preset=args.preset, jobs=args.jobs)
    if args.command == "sweep":
        return cmd_sweep(args.config, args.parameter, args.values, args.out, args.seed, args.runs,
                         preset=args.preset, jobs=args.jobs)
    return cmd_verify(args.config, full=args.full, jobs=args.jobs)


if __name__ == "__main__":
    sys.exit(main())
