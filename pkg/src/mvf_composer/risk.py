"""Per-agent risk states, trust-weighted aggregation and covariance blending."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .agents import ActionType, AgentRecord
from .errors import InvalidInputError, UndefinedRateError

SYMMETRY_TOL = 1e-12
PSD_TOL = 1e-10


@dataclass(frozen=True)
class RiskState:
    per_agent: np.ndarray
    aggregate: float
    weights_used: np.ndarray


@dataclass(frozen=True)
class CovarianceSet:
    historical: np.ndarray
    stress: np.ndarray
    blended: np.ndarray
    alpha: float


def peg_contribution(record: AgentRecord, peg_deviation: float, pool_liquidity: float,
                     impact: float = 0.5, liquidity_floor: float = 1.0) -> float:
    """Change in |peg deviation| that this record's order flow alone would cause.

    Positive means the action pushed the peg further away from par. LP
    withdrawals and holds carry no direct price impact.
    """
    if record.action_type in (ActionType.HOLD, ActionType.WITHDRAW):
        return 0.0
    move = -impact * record.quantity / max(pool_liquidity, liquidity_floor)
    return abs(peg_deviation + move) - abs(peg_deviation)


def agent_risk_state(record: AgentRecord, max_qty: float, delta_peg_contribution: float,
                     epsilon: float = 0.01) -> float:
    """Mean of panic, relative order size and destabilizing peg impact, each clipped to [0, 1]."""
    if max_qty <= 0:
        raise InvalidInputError("max_qty must be positive")
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be positive")
    size = min(1.0, abs(record.quantity) / max_qty)
    impact = min(1.0, max(0.0, delta_peg_contribution / epsilon))
    return (record.panic_level + size + impact) / 3.0


def aggregate_risk(per_agent: Sequence[float], trust: Sequence[float]) -> float:
    """Trust-weighted mean of per-agent risk states."""
    r = np.asarray(per_agent, dtype=float)
    t = np.asarray(trust, dtype=float)
    if r.size == 0:
        raise UndefinedRateError("cannot aggregate an empty population")
    if r.shape != t.shape:
        raise InvalidInputError("risk and trust vectors must align")
    if np.any(t <= 0):
        raise InvalidInputError("trust scores must be positive")
    value = float(t @ r / t.sum())
    # Keep the convex-combination bound exact despite rounding.
    return min(float(r.max()), max(float(r.min()), value))


def risk_state(per_agent: Sequence[float], trust: Sequence[float]) -> RiskState:
    t = np.asarray(trust, dtype=float)
    return RiskState(np.asarray(per_agent, dtype=float), aggregate_risk(per_agent, t), t / t.sum())


def adversarial_influence(trust: Sequence[float], labels: Sequence[bool]) -> float:
    """Share of total trust mass held by adversarial agents."""
    t = np.asarray(trust, dtype=float)
    adv = np.asarray(labels, dtype=bool)
    if t.shape != adv.shape:
        raise InvalidInputError("trust and labels must align")
    if not adv.any():
        return 0.0
    return float(t[adv].sum() / t.sum())


def influence_bound(rho: float, mean_adversarial: float, mean_benign: float) -> float:
    """Adversarial influence implied by group mean trust at adversary fraction ``rho``."""
    adv = rho * mean_adversarial
    return adv / (adv + (1.0 - rho) * mean_benign)


def estimate_stress_covariance(trajectories: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of per-run unbiased sample covariances of asset returns."""
    if len(trajectories) == 0:
        raise InvalidInputError("need at least one stress run")
    covs = []
    for run in trajectories:
        x = np.asarray(run, dtype=float)
        if x.ndim != 2 or x.shape[0] < 2:
            raise InvalidInputError("each run needs at least 2 return observations")
        covs.append(np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1]))
    cov = np.mean(covs, axis=0)
    return 0.5 * (cov + cov.T)


def blend_alpha(r: float) -> float:
    if not 0.0 <= r <= 1.0:
        raise InvalidInputError(f"risk state must lie in [0, 1], got {r}")
    return r * r


def blend_alpha_derivative(r: float) -> float:
    return 2.0 * r


def check_psd(matrix: np.ndarray, name: str = "matrix") -> np.ndarray:
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidInputError(f"{name} must be square")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if np.max(np.abs(m - m.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise InvalidInputError(f"{name} is not symmetric")
    if m.size and np.linalg.eigvalsh(m)[0] < -PSD_TOL * scale:
        raise InvalidInputError(f"{name} is not positive semi-definite")
    return m


def blend_covariance(hist: np.ndarray, stress: np.ndarray, alpha: float) -> CovarianceSet:
    h = check_psd(hist, "historical covariance")
    s = check_psd(stress, "stress covariance")
    if h.shape != s.shape:
        raise InvalidInputError("covariance dimensions differ")
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError("alpha must lie in [0, 1]")
    if alpha == 0.0:
        blended = h.copy()
    elif alpha == 1.0:
        blended = s.copy()
    else:
        blended = (1.0 - alpha) * h + alpha * s
    return CovarianceSet(h, s, blended, float(alpha))


def weyl_bounds(hist: np.ndarray, stress: np.ndarray, alpha: float) -> tuple[float, float]:
    """Interval that contains every eigenvalue of the blend.

    The minimum eigenvalue is concave and the maximum convex in the matrix,
    so both extremes of the blend stay between the blended extremes.
    """
    eh = np.linalg.eigvalsh(hist)
    es = np.linalg.eigvalsh(stress)
    return (1.0 - alpha) * eh[0] + alpha * es[0], (1.0 - alpha) * eh[-1] + alpha * es[-1]


def fragility_ratio(weights: Sequence[float], hist: np.ndarray, stress: np.ndarray) -> float:
    """Stress-to-historical variance of a fixed portfolio."""
    w = np.asarray(weights, dtype=float)
    expected = float(w @ np.asarray(hist) @ w)
    if expected <= 0:
        raise UndefinedRateError("portfolio has zero historical variance")
    return float(w @ np.asarray(stress) @ w) / expected


def rayleigh_bound(hist: np.ndarray, stress: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(stress)[-1] / np.linalg.eigvalsh(hist)[0])


def save_covariance(path: str | Path, matrix: np.ndarray, names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(names))
        for row in np.asarray(matrix):
            writer.writerow([repr(float(x)) for x in row])


def load_covariance(path: str | Path) -> tuple[np.ndarray, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0]
    matrix = np.array([[float(x) for x in row] for row in rows[1:]])
    if matrix.shape != (len(names), len(names)):
        raise InvalidInputError(f"{path}: expected a {len(names)}x{len(names)} matrix")
    return matrix, names
