"""Constrained mean-variance solver with KKT verification.

Problem::

    minimize    w' S w - lam * mu' w
    subject to  sum(w) = 1,  lo <= w <= hi,  ||w - w_prev||_1 <= tau

Solved by a primal active-set method. The L1 turnover ball is handled
exactly as the intersection of its sign facets s'(w - w_prev) <= tau,
s in {-1, +1}^n; facets are generated lazily when a step runs into one, so
only the handful that can be active ever enter the working set.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import nnls

from .errors import InfeasibleProblemError, InvalidInputError

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
MAX_ITERATIONS = 10_000
RIDGE = 1e-10
# Slack below which a constraint counts as active.
ACTIVE_TOL = 1e-9


@dataclass(frozen=True)
class PortfolioProblem:
    covariance: np.ndarray
    expected_returns: np.ndarray
    risk_aversion: float
    prev_weights: np.ndarray
    turnover_limit: float
    lower_bounds: np.ndarray
    upper_bounds: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        n = cov.shape[0] if cov.ndim == 2 else -1
        if cov.ndim != 2 or cov.shape != (n, n) or n < 1:
            raise InvalidInputError("covariance must be a non-empty square matrix")
        vectors = {}
        for name in ("expected_returns", "prev_weights", "lower_bounds", "upper_bounds"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if v.shape != (n,):
                raise InvalidInputError(f"{name} must have length {n}")
            if not np.all(np.isfinite(v)):
                raise InvalidInputError(f"{name} must be finite")
            vectors[name] = v
        scale = max(1.0, float(np.max(np.abs(cov))))
        if not np.all(np.isfinite(cov)) or np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
            raise InvalidInputError("covariance must be finite and symmetric")
        if np.linalg.eigvalsh(cov)[0] < -1e-10 * scale:
            raise InvalidInputError("covariance is not positive semi-definite")
        if not self.risk_aversion > 0:
            raise InvalidInputError("risk_aversion must be positive")
        if not self.turnover_limit >= 0:
            raise InvalidInputError("turnover_limit must be non-negative")
        prev = vectors["prev_weights"]
        if abs(prev.sum() - 1.0) > 1e-8 or np.any(prev < -1e-12):
            raise InvalidInputError("prev_weights must lie on the simplex")
        object.__setattr__(self, "covariance", cov)
        for name, v in vectors.items():
            object.__setattr__(self, name, v)

    @property
    def n(self) -> int:
        return self.covariance.shape[0]

    def objective(self, w: np.ndarray) -> float:
        w = np.asarray(w, dtype=float)
        return float(w @ self.covariance @ w - self.risk_aversion * self.expected_returns @ w)

    def gradient(self, w: np.ndarray) -> np.ndarray:
        return 2.0 * self.covariance @ w - self.risk_aversion * self.expected_returns

    def to_json(self) -> dict:
        return {
            "covariance": self.covariance.tolist(),
            "expected_returns": self.expected_returns.tolist(),
            "risk_aversion": self.risk_aversion,
            "prev_weights": self.prev_weights.tolist(),
            "turnover_limit": None if math.isinf(self.turnover_limit) else self.turnover_limit,
            "lower_bounds": self.lower_bounds.tolist(),
            "upper_bounds": self.upper_bounds.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> PortfolioProblem:
        tau = data.get("turnover_limit")
        return cls(
            covariance=np.array(data["covariance"], dtype=float),
            expected_returns=np.array(data["expected_returns"], dtype=float),
            risk_aversion=float(data["risk_aversion"]),
            prev_weights=np.array(data["prev_weights"], dtype=float),
            turnover_limit=math.inf if tau is None else float(tau),
            lower_bounds=np.array(data["lower_bounds"], dtype=float),
            upper_bounds=np.array(data["upper_bounds"], dtype=float),
        )


@dataclass(frozen=True)
class ActiveSet:
    lower: tuple[bool, ...]
    upper: tuple[bool, ...]
    turnover: bool


@dataclass(frozen=True)
class Solution:
    weights: np.ndarray
    objective: float
    kkt_residual: float
    active_set: ActiveSet
    iterations: int
    ridge: float = 0.0
    multipliers: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "active_set": {
                "lower": list(self.active_set.lower),
                "upper": list(self.active_set.upper),
                "turnover": self.active_set.turnover,
            },
            "iterations": self.iterations,
            "ridge": self.ridge,
        }

    @classmethod
    def from_json(cls, data: dict) -> Solution:
        a = data["active_set"]
        return cls(
            weights=np.array(data["weights"], dtype=float),
            objective=float(data["objective"]),
            kkt_residual=float(data["kkt_residual"]),
            active_set=ActiveSet(tuple(a["lower"]), tuple(a["upper"]), bool(a["turnover"])),
            iterations=int(data["iterations"]),
            ridge=float(data.get("ridge", 0.0)),
        )


def save_json(path: str | Path, problem: PortfolioProblem, solution: Solution | None = None) -> None:
    payload = {"problem": problem.to_json()}
    if solution is not None:
        payload["solution"] = solution.to_json()
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_json(path: str | Path) -> tuple[PortfolioProblem, Solution | None]:
    payload = json.loads(Path(path).read_text())
    sol = payload.get("solution")
    return PortfolioProblem.from_json(payload["problem"]), Solution.from_json(sol) if sol else None


def markowitz_closed_form(covariance: np.ndarray, returns: np.ndarray, risk_aversion: float) -> np.ndarray:
    """Budget-constrained optimum with no other constraints (may be negative)."""
    cov = np.asarray(covariance, dtype=float)
    mu = np.asarray(returns, dtype=float)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise InvalidInputError("covariance must be positive definite") from exc
    if np.min(np.diag(chol)) <= 1e-12 * max(1.0, float(np.max(np.diag(chol)))):
        raise InvalidInputError("covariance is numerically singular")
    ones = np.ones(len(mu))
    inv_mu = np.linalg.solve(cov, mu)
    inv_one = np.linalg.solve(cov, ones)
    half = risk_aversion / 2.0
    return half * inv_mu + (1.0 - half * ones @ inv_mu) / (ones @ inv_one) * inv_one


# Feasibility ------------------------------------------------------------------


def minimum_turnover_point(problem: PortfolioProblem) -> np.ndarray:
    """Feasible point (budget + box) closest in L1 to the previous weights.

    Clip the previous weights into the box, then move the budget gap into
    coordinates that the clipping did not push the opposite way.
    """
    lo, hi, prev = problem.lower_bounds, problem.upper_bounds, problem.prev_weights
    x = np.clip(prev, lo, hi)
    gap = 1.0 - x.sum()
    if gap > 0:
        for i in np.argsort(-(hi - x), kind="stable"):
            add = min(gap, hi[i] - x[i])
            x[i] += add
            gap -= add
            if gap <= 0:
                break
    elif gap < 0:
        for i in np.argsort(-(x - lo), kind="stable"):
            take = min(-gap, x[i] - lo[i])
            x[i] -= take
            gap += take
            if gap >= 0:
                break
    return x


def check_feasible(problem: PortfolioProblem) -> np.ndarray:
    """Raise ``InfeasibleProblemError`` if the constraint set is empty; else return a feasible point."""
    lo, hi = problem.lower_bounds, problem.upper_bounds
    if np.any(lo > hi + 1e-12):
        raise InfeasibleProblemError("lower bound exceeds upper bound", "box")
    if lo.sum() > 1.0 + 1e-12 or hi.sum() < 1.0 - 1e-12:
        raise InfeasibleProblemError(
            f"bounds admit no budget-feasible portfolio (sum lo={lo.sum():.6g}, sum hi={hi.sum():.6g})",
            "budget+box",
        )
    x = minimum_turnover_point(problem)
    needed = float(np.abs(x - problem.prev_weights).sum())
    if needed > problem.turnover_limit + 1e-12:
        raise InfeasibleProblemError(
            f"reaching the box needs turnover {needed:.6g} > limit {problem.turnover_limit:.6g}",
            "turnover",
        )
    return x


# Active-set solver ----------------------------------------------------------------


@dataclass(frozen=True)
class _Constraint:
    """Linear constraint a'w <= b (or == b when ``equality``)."""

    kind: str
    a: np.ndarray
    b: float
    index: int = -1
    signs: tuple[int, ...] = ()
    equality: bool = False


def _l1(v: np.ndarray) -> float:
    return float(np.abs(v).sum())


def _turnover_step(y: np.ndarray, d: np.ndarray, tau: float, t_cap: float) -> tuple[float, Optional[np.ndarray]]:
    """Largest t in [0, t_cap] with ||y + t d||_1 <= tau, plus the facet that blocks.

    ``y`` is the current displacement from the previous weights. The L1 norm
    is piecewise linear along the ray; each piece between sign changes has
    its own facet, and the first piece that climbs past ``tau`` blocks.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        kinks = -y / d
    kinks = np.unique(kinks[np.isfinite(kinks) & (kinks > 0) & (kinks < t_cap)])
    points = np.concatenate(([0.0], kinks, [t_cap]))
    scale = max(1.0, float(np.abs(d).sum()))
    for t0, t1 in zip(points[:-1], points[1:]):
        if t1 <= t0:
            continue
        mid = y + 0.5 * (t0 + t1) * d
        signs = np.where(mid > 0, 1.0, np.where(mid < 0, -1.0, np.sign(d)))
        signs[signs == 0] = 1.0
        slope = float(signs @ d)
        if slope <= 1e-14 * scale:
            continue
        v0 = _l1(y + t0 * d)
        if v0 + slope * (t1 - t0) <= tau + 1e-13:
            continue
        t = t0 + max(0.0, tau - v0) / slope
        return min(max(t, t0), t1), signs
    return t_cap, None


def _solve_eqp(G: np.ndarray, g: np.ndarray, A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimize 1/2 p'Gp + g'p subject to A p = 0; return (p, multipliers)."""
    n = len(g)
    m = A.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = G
    kkt[:n, n:] = A.T
    kkt[n:, :n] = A
    rhs = np.concatenate([-g, np.zeros(m)])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def solve(
    problem: PortfolioProblem,
    tol: float = DEFAULT_TOL,
    x0: Sequence[float] | None = None,
    max_iterations: int = MAX_ITERATIONS,
) -> Solution:
    """Global minimizer of the constrained mean-variance problem."""
    n = problem.n
    start = check_feasible(problem)
    if x0 is not None:
        cand = np.asarray(x0, dtype=float)
        if _is_feasible(problem, cand, 1e-12):
            start = cand.copy()
        else:
            raise InvalidInputError("x0 is not feasible")

    cov = problem.covariance
    ridge = 0.0
    if np.linalg.eigvalsh(cov)[0] <= 1e-14 * max(1.0, float(np.trace(cov))):
        ridge = RIDGE
    G = 2.0 * (cov + ridge * np.eye(n))
    c = -problem.risk_aversion * problem.expected_returns
    lo, hi, prev, tau = problem.lower_bounds, problem.upper_bounds, problem.prev_weights, problem.turnover_limit
    limited = math.isfinite(tau)

    budget = _Constraint("budget", np.ones(n), 1.0, equality=True)
    bounds = [_Constraint("lower", -np.eye(n)[i], -lo[i], index=i) for i in range(n)]
    bounds += [_Constraint("upper", np.eye(n)[i], hi[i], index=i) for i in range(n)]

    x = start.copy()
    working: list[_Constraint] = [budget]
    # Degenerate vertices can stall; scale tolerance to the problem.
    step_tol = 1e-13
    mult_tol = 1e-13 * max(1.0, float(np.max(np.abs(G))), float(np.max(np.abs(c))))
    iterations = 0
    lam = np.zeros(1)
    while iterations < max_iterations:
        iterations += 1
        A = np.array([con.a for con in working])
        g = G @ x + c
        p, lam = _solve_eqp(G, g, A)
        if np.max(np.abs(p)) <= step_tol * max(1.0, np.max(np.abs(x))):
            ineq = [(k, lam[k]) for k, con in enumerate(working) if not con.equality]
            if not ineq:
                break
            k_min, l_min = min(ineq, key=lambda kv: kv[1])
            if l_min >= -mult_tol:
                break
            working.pop(k_min)
            continue

        # Ratio test over box constraints not in the working set.
        t_max, blocking = 1.0, None
        in_working = {(con.kind, con.index) for con in working if con.kind != "turnover"}
        for con in bounds:
            if (con.kind, con.index) in in_working:
                continue
            ap = float(con.a @ p)
            if ap > 1e-15:
                t = (con.b - float(con.a @ x)) / ap
                t = max(t, 0.0)
                if t < t_max:
                    t_max, blocking = t, con
        if limited:
            t_turn, facet = _turnover_step(x - prev, p, tau, t_max)
            if facet is not None and t_turn <= t_max:
                signs = tuple(int(v) for v in facet)
                t_max = t_turn
                if any(con.kind == "turnover" and con.signs == signs for con in working):
                    blocking = None
                else:
                    blocking = _Constraint("turnover", facet, tau + float(facet @ prev), signs=signs)
        x = x + t_max * p
        if blocking is not None:
            working.append(blocking)
    else:
        logger.warning("active-set solver hit %d iterations without converging", max_iterations)

    x = _polish(problem, x)
    multipliers = {
        f"{con.kind}[{con.index if con.kind != 'turnover' else ''.join('+' if s > 0 else '-' for s in con.signs)}]":
            float(lam[k])
        for k, con in enumerate(working)
        if k < len(lam)
    }
    sol = Solution(
        weights=x,
        objective=problem.objective(x),
        kkt_residual=0.0,
        active_set=_active_set(problem, x),
        iterations=iterations,
        ridge=ridge,
        multipliers=multipliers,
    )
    report = kkt_check(problem, sol, tol)
    return Solution(sol.weights, sol.objective, report.residual, sol.active_set, iterations, ridge, multipliers)


def _polish(problem: PortfolioProblem, x: np.ndarray) -> np.ndarray:
    """Remove rounding-level bound violations without leaving the feasible set."""
    y = np.clip(x, problem.lower_bounds, problem.upper_bounds)
    if np.max(np.abs(y - x)) > 1e-9:
        return x
    return y


def _is_feasible(problem: PortfolioProblem, w: np.ndarray, tol: float) -> bool:
    return _primal_violation(problem, w) <= tol


def _primal_violation(problem: PortfolioProblem, w: np.ndarray) -> float:
    parts = [
        abs(float(w.sum()) - 1.0),
        float(np.max(problem.lower_bounds - w, initial=0.0)),
        float(np.max(w - problem.upper_bounds, initial=0.0)),
    ]
    if math.isfinite(problem.turnover_limit):
        parts.append(max(0.0, _l1(w - problem.prev_weights) - problem.turnover_limit))
    return max(parts)


def _active_set(problem: PortfolioProblem, w: np.ndarray) -> ActiveSet:
    lower = tuple(bool(v) for v in (w - problem.lower_bounds <= ACTIVE_TOL))
    upper = tuple(bool(v) for v in (problem.upper_bounds - w <= ACTIVE_TOL))
    turnover = math.isfinite(problem.turnover_limit) and (
        problem.turnover_limit - _l1(w - problem.prev_weights) <= ACTIVE_TOL
    )
    return ActiveSet(lower, upper, bool(turnover))


# KKT verification -------------------------------------------------------------


@dataclass(frozen=True)
class KKTReport:
    residual: float
    stationarity: float
    primal_violation: float
    complementarity: float
    budget_multiplier: float
    lower_multipliers: np.ndarray
    upper_multipliers: np.ndarray
    turnover_multiplier: float
    passed: bool


def kkt_check(problem: PortfolioProblem, solution: Solution | np.ndarray, tol: float = DEFAULT_TOL) -> KKTReport:
    """Rebuild multipliers for the active constraints and measure KKT violation.

    Multipliers come from non-negative least squares on the stationarity
    equation; inactive constraints get zero multipliers by construction. For an
    active turnover constraint the L1 normal cone is spanned by every sign
    vector consistent with the zero pattern of w - w_prev.
    """
    w = np.asarray(solution.weights if isinstance(solution, Solution) else solution, dtype=float)
    n = problem.n
    grad = problem.gradient(w)
    lo_slack = w - problem.lower_bounds
    hi_slack = problem.upper_bounds - w
    active_lo = np.flatnonzero(lo_slack <= ACTIVE_TOL)
    active_hi = np.flatnonzero(hi_slack <= ACTIVE_TOL)
    limited = math.isfinite(problem.turnover_limit)
    disp = w - problem.prev_weights
    turn_slack = problem.turnover_limit - _l1(disp) if limited else math.inf
    facets: list[np.ndarray] = []
    if limited and turn_slack <= ACTIVE_TOL:
        zero = np.flatnonzero(np.abs(disp) <= ACTIVE_TOL)
        base = np.sign(disp)
        for combo in itertools.product((-1.0, 1.0), repeat=len(zero)):
            s = base.copy()
            s[zero] = combo
            facets.append(s)

    # Columns: +budget, -budget, lower (as -e_i), upper (+e_i), facets.
    cols = [np.ones(n), -np.ones(n)]
    cols += [-np.eye(n)[i] for i in active_lo]
    cols += [np.eye(n)[i] for i in active_hi]
    cols += facets
    M = np.column_stack(cols)
    # Scale for conditioning; nnls solves min ||M z + grad||.
    z, _ = nnls(M, -grad, maxiter=50 * M.shape[1])
    stationarity = float(np.max(np.abs(M @ z + grad)))

    nu = z[0] - z[1]
    k = 2
    lower_mult = np.zeros(n)
    lower_mult[active_lo] = z[k:k + len(active_lo)]
    k += len(active_lo)
    upper_mult = np.zeros(n)
    upper_mult[active_hi] = z[k:k + len(active_hi)]
    k += len(active_hi)
    turnover_mult = float(z[k:].sum()) if facets else 0.0

    complementarity = max(
        float(np.max(lower_mult * np.maximum(lo_slack, 0.0), initial=0.0)),
        float(np.max(upper_mult * np.maximum(hi_slack, 0.0), initial=0.0)),
        turnover_mult * max(turn_slack, 0.0) if facets else 0.0,
    )
    primal = _primal_violation(problem, w)
    residual = max(stationarity, primal, complementarity)
    return KKTReport(
        residual=residual,
        stationarity=stationarity,
        primal_violation=primal,
        complementarity=complementarity,
        budget_multiplier=float(nu),
        lower_multipliers=lower_mult,
        upper_multipliers=upper_mult,
        turnover_multiplier=turnover_mult,
        passed=residual <= tol,
    )


def project_to_feasible(weights: Sequence[float], lower: Sequence[float], upper: Sequence[float]) -> np.ndarray:
    """Euclidean projection onto {sum w = 1, lower <= w <= upper} by bisection on the shift."""
    v = np.asarray(weights, dtype=float)
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    if lo.sum() > 1.0 + 1e-12 or hi.sum() < 1.0 - 1e-12 or np.any(lo > hi):
        raise InfeasibleProblemError("bounds admit no budget-feasible portfolio", "budget+box")
    a, b = float(np.min(lo - v)) - 1.0, float(np.max(hi - v)) + 1.0
    for _ in range(200):
        mid = 0.5 * (a + b)
        if np.clip(v + mid, lo, hi).sum() > 1.0:
            b = mid
        else:
            a = mid
    w = np.clip(v + 0.5 * (a + b), lo, hi)
    return w
