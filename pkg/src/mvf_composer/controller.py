"""Epoch loop of the reserve controller and its baselines.

Each epoch runs: simulate stress scenarios from the live state, log agent
records, score trust, aggregate risk, blend covariances, optimize, execute.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .agents import AgentId, AgentRecord, AttackConfig, PopulationSpec, aggregate_flows, spawn_from_spec
from .errors import InvalidInputError
from .fixtures import EXPECTED_RETURNS
from .market import (
    MarketParams,
    MarketState,
    ShockKind,
    ShockSpec,
    apply_shock,
    asset_returns,
    generate_news,
    initial_state,
    rebalance,
    step_market,
)
from .metrics import TrajectoryLog
from .optimizer import PortfolioProblem, Solution, project_to_feasible, solve
from .risk import (
    agent_risk_state,
    aggregate_risk,
    blend_alpha,
    blend_covariance,
    estimate_stress_covariance,
    peg_contribution,
)
from .trust import TrustParams, TrustReport, score_population, uniform_reports

logger = logging.getLogger(__name__)


class Method(str, Enum):
    MVF_COMPOSER = "MVFComposer"
    MVF_NO_TRUST = "MVFNoTrust"
    SAS = "SAS"
    STATIC_6040 = "Static6040"
    UNCONSTRAINED = "Unconstrained"

    @property
    def uses_harness(self) -> bool:
        return self in (Method.MVF_COMPOSER, Method.MVF_NO_TRUST, Method.UNCONSTRAINED)


@dataclass(frozen=True)
class OptimizerParams:
    risk_aversion: float = 2.5
    turnover_limit: float = 0.15
    lower_bound: float = 0.05
    upper_bound: float = 0.60
    tol: float = 1e-8

    def __post_init__(self):
        if self.risk_aversion <= 0:
            raise InvalidInputError("risk_aversion must be positive")
        if self.turnover_limit < 0:
            raise InvalidInputError("turnover_limit must be non-negative")
        if not 0.0 <= self.lower_bound <= self.upper_bound <= 1.0:
            raise InvalidInputError("weight bounds must satisfy 0 <= lower <= upper <= 1")


@dataclass(frozen=True)
class ControllerConfig:
    method: Method = Method.MVF_COMPOSER
    optimizer: OptimizerParams = field(default_factory=OptimizerParams)
    n_stress_runs: int = 8
    horizon: int = 100
    epoch_length: int = 10
    trust: TrustParams = field(default_factory=TrustParams)
    population: PopulationSpec = field(default_factory=PopulationSpec)
    attack: AttackConfig = field(default_factory=AttackConfig)
    market: MarketParams = field(default_factory=MarketParams)
    expected_returns: tuple[float, ...] = tuple(EXPECTED_RETURNS)
    # Capital scale that maps order size onto the [0, 1] risk term.
    max_qty: float = 50.0
    epsilon: float = 0.01
    harness_sentiment: float = -0.8
    # Collateral drawdown applied before each stress window (kept out of the returns).
    harness_drawdown: float = 0.10
    # Overrides used by consistency checks; None keeps the method's own behaviour.
    force_alpha: Optional[float] = None
    uniform_trust: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.n_stress_runs < 1:
            raise InvalidInputError("n_stress_runs must be at least 1")
        if self.horizon < 1:
            raise InvalidInputError("horizon must be at least 1")
        if self.epoch_length < 1:
            raise InvalidInputError("epoch_length must be at least 1")
        if self.max_qty <= 0 or self.epsilon <= 0:
            raise InvalidInputError("max_qty and epsilon must be positive")
        if self.force_alpha is not None and not 0.0 <= self.force_alpha <= 1.0:
            raise InvalidInputError("force_alpha must lie in [0, 1]")
        if len(self.expected_returns) != self.market.n_assets:
            raise InvalidInputError("expected_returns must have one entry per asset")

    @property
    def trusts_agents(self) -> bool:
        return self.method != Method.MVF_NO_TRUST and not self.uniform_trust

    def problem(self, covariance: np.ndarray, prev_weights: np.ndarray) -> PortfolioProblem:
        n = self.market.n_assets
        opt = self.optimizer
        tau = math.inf if self.method == Method.UNCONSTRAINED else opt.turnover_limit
        return PortfolioProblem(
            covariance=covariance,
            expected_returns=np.asarray(self.expected_returns, dtype=float),
            risk_aversion=opt.risk_aversion,
            prev_weights=np.asarray(prev_weights, dtype=float),
            turnover_limit=tau,
            lower_bounds=np.full(n, opt.lower_bound),
            upper_bounds=np.full(n, opt.upper_bound),
        )


@dataclass(frozen=True)
class StressRun:
    """One simulated stress window: per-agent records plus the market path."""

    records: dict[AgentId, list[AgentRecord]]
    states: list[MarketState]

    @property
    def returns(self) -> np.ndarray:
        return asset_returns(self.states)

    @property
    def peg_series(self) -> list[float]:
        return [s.peg_deviation for s in self.states]


@dataclass(frozen=True)
class EpochResult:
    epoch: int
    step: int
    weights: np.ndarray
    risk_state: float
    alpha: float
    trust_reports: list[TrustReport]
    solution: Optional[Solution]
    wall_time: float
    per_agent_risk: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fallback: bool = False

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "step": self.step,
            "weights": [float(w) for w in self.weights],
            "risk_state": self.risk_state,
            "alpha": self.alpha,
            "kkt_residual": None if self.solution is None else self.solution.kkt_residual,
            "fallback": self.fallback,
            "trust": [
                {"agent": r.agent.label, "score": r.score, "adversarial": r.agent.adversarial}
                for r in self.trust_reports
            ],
        }


Simulator = Callable[[ControllerConfig, MarketState, int, int], StressRun]


def static_weights(n_assets: int, lower: float, upper: float) -> np.ndarray:
    """60% in the first asset and the rest split evenly, projected into the box."""
    if n_assets == 1:
        target = np.ones(1)
    else:
        target = np.full(n_assets, 0.4 / (n_assets - 1))
        target[0] = 0.6
    return project_to_feasible(target, np.full(n_assets, lower), np.full(n_assets, upper))


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([abs(int(p)) for p in parts]).generate_state(1)[0])


def simulate_stress_run(config: ControllerConfig, state: MarketState, population_seed: int,
                        stream_seed: int) -> StressRun:
    """Replay the population from ``state`` under a crisis regime for one trust window.

    The window opens just after a collateral crash and sentiment collapse and
    runs under full crisis return noise, so agents reveal how they behave
    under pressure. The crash itself is applied before the window so the
    stress covariance reflects crisis co-movement rather than one jump.
    """
    params = config.market
    crash = ShockSpec(ShockKind.BLACK_THURSDAY, state.step, config.harness_drawdown, config.harness_sentiment)
    start = replace(apply_shock(state, crash, params), stress_level=1.0)
    # News keeps running the crisis pool; the shock itself is already applied.
    news_shock = ShockSpec.sentiment_shock(start.step, config.harness_sentiment)
    population = spawn_from_spec(
        config.population,
        population_seed,
        attack=config.attack,
        n_assets=params.n_assets,
        stream_seed=stream_seed,
        shock_step=start.step,
        impact=params.impact,
    )
    rng = np.random.default_rng([stream_seed, 3])
    records: dict[AgentId, list[AgentRecord]] = {a.agent: [] for a in population}
    states = [start]
    st = start
    for _ in range(config.trust.window):
        news = generate_news(stream_seed, st.step, news_shock, n_assets=params.n_assets)
        step_records = [a.act(st, news) for a in population]
        for r in step_records:
            records[r.agent].append(r)
        flow, withdrawn, minted = aggregate_flows(step_records, params.n_assets)
        st = step_market(st, flow, news, None, params=params, rng=rng, withdrawn=withdrawn, minted=minted)
        states.append(st)
    return StressRun(records, states)


def _window_risk(config: ControllerConfig, run: StressRun) -> np.ndarray:
    """Per-agent risk state averaged over the window."""
    params = config.market
    out = []
    for recs in run.records.values():
        values = [
            agent_risk_state(
                r,
                config.max_qty,
                peg_contribution(r, run.states[k].peg_deviation, run.states[k].pool_liquidity,
                                 params.impact, params.liquidity_floor),
                config.epsilon,
            )
            for k, r in enumerate(recs)
        ]
        out.append(float(np.mean(values)))
    return np.array(out)


def _average_reports(per_run: Sequence[Sequence[TrustReport]]) -> list[TrustReport]:
    merged = []
    for column in zip(*per_run):
        feats = np.mean([r.features for r in column], axis=0)
        score = float(np.mean([r.score for r in column]))
        merged.append((column[0].agent, feats, score))
    total = sum(m[2] for m in merged)
    return [TrustReport(a, *map(float, f), s, s / total) for a, f, s in merged]


def run_epoch(
    config: ControllerConfig,
    hist_cov: np.ndarray,
    prev_weights: Sequence[float],
    rng_seed: int,
    *,
    state: MarketState | None = None,
    epoch: int = 0,
    population_seed: int | None = None,
    simulate: Simulator | None = None,
) -> EpochResult:
    """One rebalancing decision from the current market state."""
    started = time.perf_counter()
    params = config.market
    state = state or initial_state(params)
    prev = np.asarray(prev_weights, dtype=float)
    population_seed = rng_seed if population_seed is None else population_seed
    opt = config.optimizer
    n = params.n_assets

    if config.method == Method.STATIC_6040:
        w = static_weights(n, opt.lower_bound, opt.upper_bound)
        return EpochResult(epoch, state.step, w, 0.0, 0.0, [], None, time.perf_counter() - started)

    reports: list[TrustReport] = []
    per_agent = np.zeros(0)
    risk = 0.0
    alpha = 0.0
    cov = np.asarray(hist_cov, dtype=float)
    fallback = False
    if config.method.uses_harness:
        simulate = simulate or simulate_stress_run
        try:
            runs = [
                simulate(config, state, population_seed, _derive_seed(rng_seed, epoch, s))
                for s in range(config.n_stress_runs)
            ]
            per_run_reports = []
            for run in runs:
                if config.trusts_agents:
                    per_run_reports.append(score_population(run.records, run.peg_series, config.trust))
                else:
                    per_run_reports.append(uniform_reports(list(run.records)))
            reports = _average_reports(per_run_reports)
            per_agent = np.mean([_window_risk(config, run) for run in runs], axis=0)
            risk = aggregate_risk(per_agent, [r.score for r in reports])
            alpha = blend_alpha(risk)
            stress_cov = estimate_stress_covariance([run.returns for run in runs])
        except Exception:
            logger.warning("stress harness failed at epoch %d; using historical covariance", epoch, exc_info=True)
            fallback = True
            reports, per_agent, risk, alpha = [], np.zeros(0), 0.0, 0.0
        if config.force_alpha is not None:
            alpha = config.force_alpha
        if not fallback:
            cov = blend_covariance(cov, stress_cov, alpha).blended

    solution = solve(config.problem(cov, prev), tol=opt.tol)
    return EpochResult(
        epoch=epoch,
        step=state.step,
        weights=solution.weights,
        risk_state=float(risk),
        alpha=float(alpha),
        trust_reports=reports,
        solution=solution,
        wall_time=time.perf_counter() - started,
        per_agent_risk=per_agent,
        fallback=fallback,
    )


def run_trajectory(
    config: ControllerConfig,
    shock: ShockSpec,
    rng_seed: int,
    *,
    run_id: int = 0,
    simulate: Simulator | None = None,
) -> TrajectoryLog:
    """Closed-loop run: agents trade every step, the controller rebalances every epoch."""
    params = config.market
    n = params.n_assets
    hist_cov = params.calm_covariance
    weights = np.full(n, 1.0 / n)
    state = initial_state(params, weights)
    population = spawn_from_spec(
        config.population,
        rng_seed,
        attack=config.attack,
        n_assets=n,
        shock_step=shock.injection_step,
        impact=params.impact,
    )
    rng = np.random.default_rng([abs(int(rng_seed)), 5])
    log = TrajectoryLog(run_id, config.method.value, shock.kind.value, shock.injection_step, states=[state])
    for t in range(config.horizon):
        if t % config.epoch_length == 0:
            result = run_epoch(config, hist_cov, weights, rng_seed, state=state,
                               epoch=t // config.epoch_length, population_seed=rng_seed, simulate=simulate)
            weights = result.weights
            state = rebalance(state, weights)
            log.epochs.append(result)
        news = generate_news(rng_seed, t, shock, n_assets=n)
        step_records = [a.act(state, news) for a in population]
        flow, withdrawn, minted = aggregate_flows(step_records, n)
        state = step_market(state, flow, news, shock, params=params, rng=rng, withdrawn=withdrawn, minted=minted)
        log.states.append(state)
        log.records.append(step_records)
    return log
