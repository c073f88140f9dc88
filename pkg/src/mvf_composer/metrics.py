"""Stability and security metrics computed from trajectory logs."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .agents import AgentRecord
from .errors import InvalidInputError, UndefinedRateError
from .market import MarketState
from .trust import TrustReport, detection_metrics

RECOVERY_EPSILON = 0.01

Trajectory = Union[Sequence[MarketState], Sequence[float], np.ndarray]

TRAJECTORY_COLUMNS = ("run_id", "step", "peg_deviation", "sentiment", "liquidity", "supply", "collateral_value")
SUMMARY_COLUMNS = ("method", "peak_dev", "recovery", "bad_debt", "liq_ret")


def _pegs(trajectory: Trajectory) -> np.ndarray:
    items = list(trajectory)
    if items and isinstance(items[0], MarketState):
        return np.array([s.peg_deviation for s in items], dtype=float)
    return np.asarray(items, dtype=float)


def peak_deviation(trajectory: Trajectory) -> float:
    peg = _pegs(trajectory)
    if peg.size == 0:
        raise InvalidInputError("trajectory is empty")
    return float(np.max(np.abs(peg)))


def recovery_time(trajectory: Trajectory, t_s: int, epsilon: float = RECOVERY_EPSILON) -> Optional[int]:
    """Steps after ``t_s`` until |peg deviation| first drops below ``epsilon``; None if never."""
    peg = _pegs(trajectory)
    if not 0 <= t_s < len(peg):
        raise InvalidInputError(f"shock step {t_s} outside trajectory of length {len(peg)}")
    after = np.flatnonzero(np.abs(peg[t_s + 1:]) < epsilon)
    return int(after[0]) + 1 if after.size else None


def bad_debt(trajectory: Sequence[MarketState]) -> int:
    """Number of steps where collateral value is below outstanding supply."""
    return sum(1 for s in trajectory if s.collateral_value < s.stablecoin_supply)


def liquidity_retention(trajectory: Sequence[MarketState], t_s: int) -> float:
    if t_s < 1 or t_s > len(trajectory):
        raise InvalidInputError("shock step must satisfy 1 <= t_s <= len(trajectory)")
    before = trajectory[t_s - 1].pool_liquidity
    if before <= 0:
        raise UndefinedRateError("pre-shock liquidity is zero")
    return trajectory[-1].pool_liquidity / before


def mean_recovery(values: Iterable[Optional[int]], censor_at: Optional[float] = None) -> float:
    """Mean recovery time. Unrecovered runs are dropped, or counted as ``censor_at`` when given."""
    vals = [censor_at if v is None else v for v in values]
    vals = [v for v in vals if v is not None]
    if not vals:
        return math.nan
    return float(np.mean(vals))


def paired_fraction_lower(a: Sequence[float], b: Sequence[float]) -> float:
    """Share of pairs where ``a`` is strictly lower than ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size == 0:
        raise InvalidInputError("paired samples must be non-empty and aligned")
    return float(np.mean(a < b))


# Security ---------------------------------------------------------------------


@dataclass(frozen=True)
class SecuritySummary:
    tpr: float
    fpr: float
    mean_influence: float
    adversary_fraction: float
    influence_reduction: float
    n_observations: int

    def to_json(self) -> dict:
        return {
            "tpr": self.tpr,
            "fpr": self.fpr,
            "mean_influence": self.mean_influence,
            "adversary_fraction": self.adversary_fraction,
            "influence_reduction": self.influence_reduction,
            "n_observations": self.n_observations,
        }


def security_summary(runs: Sequence[Sequence[TrustReport]], threshold: float = 0.5) -> SecuritySummary:
    """Pool detection and influence over labelled trust logs.

    Each element of ``runs`` is one scored population (one window). Labels
    come from ``TrustReport.agent.adversarial``. Influence reduction compares
    the mean trust-weighted adversarial share with the mean head-count share
    that uniform weighting would give.
    """
    scores, labels, influences, fractions = [], [], [], []
    for reports in runs:
        if not reports:
            continue
        s = np.array([r.score for r in reports])
        adv = np.array([r.agent.adversarial for r in reports])
        scores.extend(s)
        labels.extend(adv)
        influences.append(float(s[adv].sum() / s.sum()) if adv.any() else 0.0)
        fractions.append(float(adv.mean()))
    if not scores:
        raise UndefinedRateError("no trust reports to summarize")
    tpr, fpr = detection_metrics(scores, labels, threshold)
    mean_infl = float(np.mean(influences))
    rho = float(np.mean(fractions))
    reduction = 1.0 - mean_infl / rho if rho > 0 else 0.0
    return SecuritySummary(tpr, fpr, mean_infl, rho, reduction, len(scores))


# Logs -------------------------------------------------------------------------


@dataclass
class TrajectoryLog:
    run_id: int
    method: str
    shock: str
    shock_step: int
    states: list[MarketState] = field(default_factory=list)
    records: list[list[AgentRecord]] = field(default_factory=list)
    epochs: list = field(default_factory=list)

    @property
    def peg_series(self) -> np.ndarray:
        return _pegs(self.states)

    def stability(self, epsilon: float = RECOVERY_EPSILON) -> dict:
        return {
            "peak_dev": peak_deviation(self.states),
            "recovery": recovery_time(self.states, self.shock_step, epsilon),
            "bad_debt": bad_debt(self.states),
            "liq_ret": liquidity_retention(self.states, self.shock_step),
        }

    def trust_logs(self) -> list[list[TrustReport]]:
        return [e.trust_reports for e in self.epochs if e.trust_reports]


def write_trajectory_csv(path: str | Path, run_id: int, states: Sequence[MarketState]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for s in states:
            writer.writerow([run_id, s.step, repr(s.peg_deviation), repr(s.sentiment), repr(s.pool_liquidity),
                             repr(s.stablecoin_supply), repr(s.collateral_value)])


def write_trajectory_jsonl(path: str | Path, run_id: int, states: Sequence[MarketState]) -> None:
    with open(path, "w") as fh:
        for s in states:
            row = dict(zip(TRAJECTORY_COLUMNS, (run_id, s.step, s.peg_deviation, s.sentiment, s.pool_liquidity,
                                                s.stablecoin_supply, s.collateral_value)))
            fh.write(json.dumps(row) + "\n")


def read_trajectory_jsonl(path: str | Path) -> list[LoggedStep]:
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return [LoggedStep(r["run_id"], r["step"], r["peg_deviation"], r["sentiment"], r["liquidity"], r["supply"],
                       r["collateral_value"]) for r in rows]


@dataclass(frozen=True)
class LoggedStep:
    """Row of a serialized trajectory; exposes the fields the metrics read."""

    run_id: int
    step: int
    peg_deviation: float
    sentiment: float
    pool_liquidity: float
    stablecoin_supply: float
    collateral_value: float


def read_trajectory_csv(path: str | Path) -> list[LoggedStep]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRAJECTORY_COLUMNS:
            raise InvalidInputError(f"{path}: unexpected columns {reader.fieldnames}")
        return [
            LoggedStep(int(r["run_id"]), int(r["step"]), float(r["peg_deviation"]), float(r["sentiment"]),
                       float(r["liquidity"]), float(r["supply"]), float(r["collateral_value"]))
            for r in reader
        ]


def write_trust_csv(path: str | Path, run_id: int, epochs: Sequence) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "step", "agent", "f1", "f2", "f3", "f4", "score", "weight", "label"])
        for e in epochs:
            for r in e.trust_reports:
                writer.writerow([run_id, e.step, r.agent.label, repr(r.f1), repr(r.f2), repr(r.f3), repr(r.f4),
                                 repr(r.score), repr(r.normalized_weight), int(r.agent.adversarial)])


def write_summary_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow(["" if row.get(c) is None else row.get(c) for c in SUMMARY_COLUMNS])
