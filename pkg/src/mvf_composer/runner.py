"""Seeded batch execution over (method, shock) cells and artifact emission."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .config import Config, dump_yaml, set_parameter
from .controller import Method, run_trajectory
from .errors import InvalidInputError, UndefinedRateError
from .metrics import (
    SUMMARY_COLUMNS,
    mean_recovery,
    paired_fraction_lower,
    security_summary,
    write_summary_csv,
    write_trajectory_csv,
    write_trust_csv,
)
from .trust import TrustReport

logger = logging.getLogger(__name__)

SWEEP_ALIASES = {
    "rho": "experiment.adversary_fraction",
    "adversary_fraction": "experiment.adversary_fraction",
    "shock_magnitude": "shock.price_drawdown",
}


@dataclass(frozen=True)
class RunTask:
    config: Config
    method: Method
    shock: str
    run_id: int
    out_dir: Optional[str] = None


@dataclass
class RunResult:
    method: str
    shock: str
    run_id: int
    seed: int
    metrics: dict = field(default_factory=dict)
    mean_alpha: float = 0.0
    trust_logs: list[list[TrustReport]] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def run_seed(config: Config, run_id: int) -> int:
    return config.experiment.seed + run_id


def execute(task: RunTask) -> RunResult:
    """Run one trajectory and write its CSVs; failures are captured, not raised."""
    config = task.config
    seed = run_seed(config, task.run_id)
    result = RunResult(task.method.value, task.shock, task.run_id, seed)
    try:
        log = run_trajectory(config.controller_for(task.method), config.shock_spec(task.shock), seed,
                             run_id=task.run_id)
        result.metrics = log.stability(config.experiment.recovery_epsilon)
        result.mean_alpha = float(np.mean([e.alpha for e in log.epochs])) if log.epochs else 0.0
        result.trust_logs = log.trust_logs() if config.controller_for(task.method).trusts_agents else []
        if task.out_dir is not None:
            cell = Path(task.out_dir) / task.method.value / task.shock
            cell.mkdir(parents=True, exist_ok=True)
            write_trajectory_csv(cell / f"run_{task.run_id}.csv", task.run_id, log.states)
            if any(e.trust_reports for e in log.epochs):
                write_trust_csv(cell / f"trust_{task.run_id}.csv", task.run_id, log.epochs)
    except Exception as exc:  # noqa: BLE001 - one bad run must not stop the batch
        logger.error("run %s/%s/%d failed: %s", task.method.value, task.shock, task.run_id, exc, exc_info=True)
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def _map(tasks: Sequence[RunTask], jobs: int) -> list[RunResult]:
    if jobs <= 1 or len(tasks) <= 1:
        return [execute(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(execute, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


def run_batch(config: Config, out_dir: str | Path | None = None, jobs: int | None = None) -> list[RunResult]:
    """Every configured (method, shock, run) combination; paired methods share seeds."""
    jobs = jobs or os.cpu_count() or 1
    exp = config.experiment
    tasks = [
        RunTask(config, method, shock.value, run_id, None if out_dir is None else str(out_dir))
        for method in exp.methods
        for shock in exp.shocks
        for run_id in range(exp.n_runs)
    ]
    results = _map(tasks, jobs)
    return sorted(results, key=lambda r: (exp.methods.index(Method(r.method)), r.shock, r.run_id))


# Summaries ----------------------------------------------------------------------


def _finite_mean(values: Iterable[float]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _json_float(x: Optional[float]) -> Optional[float]:
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def cell_summary(results: Sequence[RunResult], horizon: int, shock_step: int) -> dict:
    ok = [r for r in results if r.ok]
    rec = [r.metrics["recovery"] for r in ok]
    out = {
        "n_runs": len(results),
        "n_failed": len(results) - len(ok),
        "peak_dev": _finite_mean(r.metrics["peak_dev"] for r in ok),
        "peak_dev_std": float(np.std([r.metrics["peak_dev"] for r in ok])) if ok else None,
        "recovery": _json_float(mean_recovery(rec)),
        "recovery_censored": _json_float(mean_recovery(rec, censor_at=horizon - shock_step)),
        "n_unrecovered": sum(1 for v in rec if v is None),
        "bad_debt": _finite_mean(r.metrics["bad_debt"] for r in ok),
        "liq_ret": _finite_mean(r.metrics["liq_ret"] for r in ok),
        "mean_alpha": _finite_mean(r.mean_alpha for r in ok),
    }
    logs = [log for r in ok for log in r.trust_logs]
    if logs:
        try:
            out["security"] = security_summary(logs).to_json()
        except UndefinedRateError as exc:
            out["security"] = {"undefined": str(exc)}
    return out


def _paired(results: Sequence[RunResult], config: Config) -> dict:
    """Share of seeds where MVFComposer's peak deviation is below each other method's."""
    reference = Method.MVF_COMPOSER.value
    by_key = {(r.method, r.shock, r.run_id): r for r in results if r.ok}
    out: dict = {}
    if Method.MVF_COMPOSER not in config.experiment.methods:
        return out
    for shock in config.experiment.shocks:
        for method in config.experiment.methods:
            if method == Method.MVF_COMPOSER:
                continue
            pairs = [
                (by_key[(reference, shock.value, i)].metrics["peak_dev"], by_key[(method.value, shock.value, i)].metrics["peak_dev"])
                for i in range(config.experiment.n_runs)
                if (reference, shock.value, i) in by_key and (method.value, shock.value, i) in by_key
            ]
            if pairs:
                a, b = zip(*pairs)
                out.setdefault(shock.value, {})[f"{reference}<{method.value}"] = paired_fraction_lower(a, b)
    return out


def summarize(results: Sequence[RunResult], config: Config) -> dict:
    horizon = config.controller.horizon
    step = config.shock.injection_step
    cells: dict = {}
    for method in config.experiment.methods:
        for shock in config.experiment.shocks:
            subset = [r for r in results if r.method == method.value and r.shock == shock.value]
            cells.setdefault(method.value, {})[shock.value] = cell_summary(subset, horizon, step)
    return {
        "seed": config.experiment.seed,
        "n_runs": config.experiment.n_runs,
        "methods": cells,
        "paired_peak_fraction_lower": _paired(results, config),
        "failures": sum(1 for r in results if not r.ok),
    }


def write_outputs(out_dir: str | Path, results: Sequence[RunResult], config: Config) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(results, config)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "config.yaml").write_text(dump_yaml(config))
    for shock in config.experiment.shocks:
        rows = [{"method": m, **{c: cells[shock.value][c] for c in SUMMARY_COLUMNS[1:]}}
                for m, cells in summary["methods"].items()]
        write_summary_csv(out / f"summary_{shock.value}.csv", rows)
    return summary


# Sweeps -------------------------------------------------------------------------

SWEEP_COLUMNS = ("parameter", "value", "method", "shock", "n_runs", "n_failed",
                 "peak_dev", "recovery", "recovery_censored", "bad_debt", "liq_ret", "mean_alpha")


def resolve_parameter(name: str) -> str:
    return SWEEP_ALIASES.get(name, name)


def run_sweep(config: Config, parameter: str, values: Sequence, out_dir: str | Path,
              jobs: int | None = None) -> list[dict]:
    """One batch per value; returns the long-format rows also written to ``sweep.csv``."""
    if len(values) == 0:
        raise InvalidInputError("sweep needs at least one value")
    name = resolve_parameter(parameter)
    configs = [(v, set_parameter(config, name, v)) for v in values]
    rows = []
    out = Path(out_dir)
    for value, cfg in configs:
        results = run_batch(cfg, out / f"{name}={value}", jobs)
        summary = write_outputs(out / f"{name}={value}", results, cfg)
        for method, cells in summary["methods"].items():
            for shock, cell in cells.items():
                rows.append({"parameter": name, "value": value, "method": method, "shock": shock,
                             **{c: cell[c] for c in SWEEP_COLUMNS[4:]}})
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if row[k] is None else row[k] for k in SWEEP_COLUMNS})
    return rows
