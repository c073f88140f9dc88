"""Self-checks behind ``mvf verify`` and the acceptance tests.

Every check returns a ``CheckResult``; the heavy simulation checks accept
precomputed batches so the test suite can share runs between them.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .agents import PopulationSpec
from .config import Config, load_config
from .controller import Method, run_epoch
from .market import ShockKind, initial_state
from .metrics import mean_recovery, paired_fraction_lower, recovery_time, security_summary
from .optimizer import PortfolioProblem, check_feasible, kkt_check, markowitz_closed_form, solve
from .risk import (
    adversarial_influence,
    aggregate_risk,
    blend_covariance,
    fragility_ratio,
    influence_bound,
    rayleigh_bound,
    weyl_bounds,
)
from .runner import RunResult, run_batch, write_outputs
from .trust import TrustParams, trust_gradient, trust_score

logger = logging.getLogger(__name__)

SIGMOID_REFERENCE = 0.310026
REFERENCE_FEATURES = (0.5, 0.5, 1.0, 0.3)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    start = time.perf_counter()
    try:
        passed, detail = fn()
    except Exception as exc:  # noqa: BLE001 - a crashing check is a failing check
        logger.debug("check %s raised", name, exc_info=True)
        passed, detail = False, f"raised {type(exc).__name__}: {exc}"
    return CheckResult(name, bool(passed), detail, time.perf_counter() - start)


def _random_psd(rng: np.random.Generator, n: int, rank: Optional[int] = None, scale: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((n, rank or n)) * scale
    return a @ a.T


# 1-2: closed-form constants -----------------------------------------------------


def check_trust_arithmetic(params: TrustParams | None = None) -> CheckResult:
    def run():
        value = trust_score(REFERENCE_FEATURES, params or TrustParams())
        return abs(value - SIGMOID_REFERENCE) <= 1e-5, f"score={value:.6f} expected {SIGMOID_REFERENCE}±1e-5"
    return _timed("trust_arithmetic", run)


def check_influence_bounds(n_random: int = 1000, seed: int = 0) -> CheckResult:
    def run():
        bound = influence_bound(0.2, 0.35, 0.75)
        labels = [True] * 2 + [False] * 8
        measured = adversarial_influence([0.35] * 2 + [0.75] * 8, labels)
        sybil = adversarial_influence([0.31] * 5 + [0.75] * 10, [True] * 5 + [False] * 10)
        ok = abs(bound - 0.1045) <= 1e-4 and measured <= bound + 1e-12 and abs(sybil - 0.1713) <= 1e-4
        rng = np.random.default_rng(seed)
        worst = -math.inf
        for _ in range(n_random):
            n = int(rng.integers(2, 30))
            adv = rng.random(n) < rng.uniform(0.05, 0.6)
            if adv.all() or not adv.any():
                continue
            t = rng.uniform(0.01, 1.0, n)
            b = influence_bound(adv.mean(), t[adv].mean(), t[~adv].mean())
            worst = max(worst, adversarial_influence(t, adv) - b)
        ok = ok and worst <= 1e-12
        return ok, (f"bound={bound:.4f} measured={measured:.4f} sybil={sybil:.4f} vs uniform {5 / 15:.4f}; "
                    f"max(influence-bound) over random populations={worst:.2e}")
    return _timed("influence_bounds", run)


# 3: trust properties ------------------------------------------------------------


def check_trust_properties(n: int = 1000, seed: int = 1, params: TrustParams | None = None) -> CheckResult:
    params = params or TrustParams()

    def run():
        rng = np.random.default_rng(seed)
        feats = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(0, 1, n), rng.uniform(0, 1, n), rng.uniform(-1, 1, n)])
        bounded = monotone = True
        worst_grad = 0.0
        h = 1e-5
        for f in feats:
            t = trust_score(f, params)
            bounded &= 0.0 < t < 1.0
            for k, direction in enumerate((1, 1, -1, -1)):
                up = f.copy()
                up[k] += 1e-3
                monotone &= direction * (trust_score(up, params) - t) > 0
            grad = trust_gradient(f, params)
            fd = np.zeros(4)
            for k in range(4):
                w_up = list(params.weights)
                w_dn = list(params.weights)
                w_up[k] += h
                w_dn[k] -= h
                fd[k] = (trust_score(f, dataclasses.replace(params, weights=tuple(w_up)))
                         - trust_score(f, dataclasses.replace(params, weights=tuple(w_dn)))) / (2 * h)
            worst_grad = max(worst_grad, float(np.linalg.norm(fd - grad) / np.linalg.norm(grad)))
        ok = bounded and monotone and worst_grad <= 1e-6
        return ok, f"bounded={bounded} monotone={monotone} max relative gradient error={worst_grad:.2e}"
    return _timed("trust_properties", run)


# 4: risk and covariance properties ----------------------------------------------


def check_risk_properties(n: int = 1000, seed: int = 2) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        convex = psd = weyl = fragile = True
        for _ in range(n):
            m = int(rng.integers(2, 8))
            r = rng.random(m)
            t = rng.uniform(1e-3, 1.0, m)
            agg = aggregate_risk(r, t)
            convex &= r.min() <= agg <= r.max()
            d = int(rng.integers(2, 7))
            hist = _random_psd(rng, d, int(rng.integers(1, d + 1)))
            stress = _random_psd(rng, d, int(rng.integers(1, d + 1)))
            alpha = float(rng.random())
            blended = blend_covariance(hist, stress, alpha).blended
            eig = np.linalg.eigvalsh(blended)
            psd &= eig[0] >= -1e-10
            lo, hi = weyl_bounds(hist, stress, alpha)
            scale = max(1.0, float(np.abs(eig).max()))
            weyl &= lo - 1e-9 * scale <= eig[0] and eig[-1] <= hi + 1e-9 * scale
            hist_pd = hist + 0.1 * np.eye(d)
            w = rng.dirichlet(np.ones(d))
            fragile &= fragility_ratio(w, hist_pd, stress + hist_pd) <= rayleigh_bound(hist_pd, stress + hist_pd) * (1 + 1e-9)
        ok = convex and psd and weyl and fragile
        return ok, f"convex={convex} psd={psd} weyl={weyl} fragility<=rayleigh={fragile}"
    return _timed("risk_properties", run)


# 5: optimizer oracles -------------------------------------------------------------


def interior_problem(rng: np.random.Generator, n: int) -> PortfolioProblem:
    """Random problem whose budget-only optimum sits strictly inside the box and turnover ball."""
    target = rng.dirichlet(np.full(n, 5.0))
    target = 0.5 * target + 0.5 / n
    cov = _random_psd(rng, n) / n + 0.05 * np.eye(n)
    lam = float(rng.uniform(0.5, 5.0))
    nu = float(rng.normal())
    mu = (2.0 * cov @ target + nu) / lam
    prev = rng.dirichlet(np.ones(n))
    return PortfolioProblem(cov, mu, lam, prev, float(np.abs(target - prev).sum()) + 0.1,
                            np.zeros(n), np.ones(n))


def _on_grid(x, step: float = 2e-3):
    return np.round(np.asarray(x) / step) * step


def random_constrained_problem(rng: np.random.Generator, n: int) -> PortfolioProblem:
    """Small problem with binding box and turnover constraints.

    Bounds, previous weights and the turnover limit sit on a 2e-3 lattice so
    every vertex and edge of the feasible set lies on the 1e-3 search grid.
    """
    while True:
        cov = _random_psd(rng, n, int(rng.integers(1, n + 1)), scale=0.1)
        mu = rng.normal(0.0, 0.05, n)
        lo = _on_grid(rng.uniform(0.0, 0.8 / n, n))
        hi = np.minimum(_on_grid(np.maximum(lo + 0.05, rng.uniform(1.2 / n, 1.0, n))), 1.0)
        prev = _on_grid(rng.dirichlet(np.ones(n)))
        prev[-1] = 1.0 - prev[:-1].sum()
        if prev[-1] < 0:
            continue
        tau = float(_on_grid(rng.uniform(0.0, 1.0)))
        try:
            problem = PortfolioProblem(cov, mu, float(rng.uniform(0.5, 5.0)), prev, tau, lo, hi)
            check_feasible(problem)
        except ValueError:
            continue
        return problem


def grid_minimum(problem: PortfolioProblem, step: float = 1e-3) -> float:
    n = problem.n
    k = int(round(1.0 / step))
    if n == 2:
        a = np.arange(k + 1) * step
        pts = np.column_stack([a, 1.0 - a])
    elif n == 3:
        i, j = np.meshgrid(np.arange(k + 1), np.arange(k + 1), indexing="ij")
        keep = i + j <= k
        a, b = i[keep] * step, j[keep] * step
        pts = np.column_stack([a, b, 1.0 - a - b])
    else:
        raise ValueError("grid search supports n in {2, 3}")
    tol = 1e-12
    feas = np.all((pts >= problem.lower_bounds - tol) & (pts <= problem.upper_bounds + tol), axis=1)
    if math.isfinite(problem.turnover_limit):
        feas &= np.abs(pts - problem.prev_weights).sum(axis=1) <= problem.turnover_limit + tol
    pts = pts[feas]
    if len(pts) == 0:
        return math.inf
    values = np.einsum("ij,jk,ik->i", pts, problem.covariance, pts) - problem.risk_aversion * pts @ problem.expected_returns
    return float(values.min())


def check_optimizer_oracles(n_interior: int = 200, n_grid: int = 50, seed: int = 3) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst_cf = worst_grid = worst_kkt = 0.0
        for _ in range(n_interior):
            problem = interior_problem(rng, int(rng.integers(2, 9)))
            sol = solve(problem)
            closed = markowitz_closed_form(problem.covariance, problem.expected_returns, problem.risk_aversion)
            worst_cf = max(worst_cf, float(np.abs(sol.weights - closed).max()))
            worst_kkt = max(worst_kkt, sol.kkt_residual)
        skipped = 0
        for k in range(n_grid):
            problem = random_constrained_problem(rng, 2 + k % 2)
            sol = solve(problem)
            grid = grid_minimum(problem)
            if not math.isfinite(grid):
                skipped += 1
                continue
            worst_grid = max(worst_grid, abs(sol.objective - grid))
            worst_kkt = max(worst_kkt, kkt_check(problem, sol).residual)
        ok = worst_cf <= 1e-6 and worst_grid <= 1e-6 and worst_kkt <= 1e-8
        return ok, (f"max |w-closed form|={worst_cf:.2e}, max |f-grid|={worst_grid:.2e} "
                    f"({n_grid - skipped} grid problems), max KKT residual={worst_kkt:.2e}")
    return _timed("optimizer_oracles", run)


# 6: recovery oracle ---------------------------------------------------------------


def decay_trajectory(delta_s: float, gamma: float, t_s: int = 0, length: int = 200) -> np.ndarray:
    peg = np.zeros(length)
    peg[t_s:] = delta_s * np.exp(-gamma * np.arange(length - t_s))
    return peg


def check_recovery_oracle(n: int = 100, seed: int = 4, epsilon: float = 0.01) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0
        for _ in range(n):
            delta_s = float(rng.uniform(0.02, 0.2))
            gamma = float(rng.uniform(0.05, 0.5))
            measured = recovery_time(decay_trajectory(delta_s, gamma), 0, epsilon)
            expected = math.ceil(math.log(delta_s / epsilon) / gamma)
            worst = max(worst, abs(measured - expected) if measured is not None else 10**9)
        return worst <= 1, f"max |measured - closed form| = {worst} step(s)"
    return _timed("recovery_oracle", run)


# 9: baseline reduction ------------------------------------------------------------


def check_baseline_reduction(config: Config | None = None, seed: int = 7) -> CheckResult:
    config = config or load_config(environ={})

    def run():
        ctl = config.controller
        state = initial_state(ctl.market)
        prev = np.full(ctl.market.n_assets, 1.0 / ctl.market.n_assets)
        hist = ctl.market.calm_covariance
        forced = dataclasses.replace(ctl, method=Method.MVF_COMPOSER, force_alpha=0.0, uniform_trust=True,
                                     n_stress_runs=2)
        a = run_epoch(forced, hist, prev, seed, state=state)
        b = run_epoch(dataclasses.replace(ctl, method=Method.SAS), hist, prev, seed, state=state)
        gap = float(np.abs(a.weights - b.weights).max())
        return gap <= 1e-8, f"max |w_forced - w_SAS| = {gap:.2e}"
    return _timed("baseline_reduction", run)


# 7, 8, 10: simulation checks ------------------------------------------------------


def detection_batch(config: Config, jobs: int | None = None) -> list[RunResult]:
    """Quick-preset MVFComposer runs under the Black Thursday replica."""
    cfg = dataclasses.replace(
        config,
        experiment=dataclasses.replace(config.experiment, methods=(Method.MVF_COMPOSER,), shocks=(ShockKind.BLACK_THURSDAY,)),
    )
    return run_batch(cfg, None, jobs)


def evaluate_detection(results: Sequence[RunResult], threshold: float = 0.5) -> tuple[bool, str]:
    logs = [log for r in results if r.ok for log in r.trust_logs]
    s = security_summary(logs, threshold)
    ok = s.tpr >= 0.7 and s.fpr <= 0.1 and 0.4 <= s.influence_reduction <= 0.85
    return ok, (f"TPR={s.tpr:.3f} FPR={s.fpr:.3f} influence reduction={s.influence_reduction:.3f} "
                f"over {len(results)} runs")


def check_detection(config: Config, jobs: int | None = None) -> CheckResult:
    return _timed("detection", lambda: evaluate_detection(detection_batch(config, jobs),
                                                          config.controller.trust.threshold))


def stability_batches(config: Config, jobs: int | None = None) -> tuple[list[RunResult], list[RunResult]]:
    """(Composer vs SAS at the configured population, Composer vs NoTrust at rho = 0.3)."""
    base = dataclasses.replace(
        config,
        experiment=dataclasses.replace(config.experiment, methods=(Method.MVF_COMPOSER, Method.SAS), shocks=(ShockKind.BLACK_THURSDAY,)),
    )
    rho_pop = PopulationSpec.with_adversary_fraction(0.3, config.controller.population)
    rho = dataclasses.replace(
        base,
        experiment=dataclasses.replace(base.experiment, methods=(Method.MVF_COMPOSER, Method.MVF_NO_TRUST)),
        controller=dataclasses.replace(config.controller, population=rho_pop),
    )
    return run_batch(base, None, jobs), run_batch(rho, None, jobs)


def _by_method(results: Sequence[RunResult], method: Method) -> list[RunResult]:
    return sorted((r for r in results if r.method == method.value), key=lambda r: r.run_id)


def evaluate_stability(sas_pairs: Sequence[RunResult], rho_pairs: Sequence[RunResult],
                       censor_at: float) -> tuple[bool, str]:
    comp = _by_method(sas_pairs, Method.MVF_COMPOSER)
    sas = _by_method(sas_pairs, Method.SAS)
    frac_sas = paired_fraction_lower([r.metrics["peak_dev"] for r in comp], [r.metrics["peak_dev"] for r in sas])
    rec_comp = mean_recovery([r.metrics["recovery"] for r in comp], censor_at)
    rec_sas = mean_recovery([r.metrics["recovery"] for r in sas], censor_at)
    comp_rho = _by_method(rho_pairs, Method.MVF_COMPOSER)
    no_trust = _by_method(rho_pairs, Method.MVF_NO_TRUST)
    frac_nt = paired_fraction_lower([r.metrics["peak_dev"] for r in comp_rho],
                                    [r.metrics["peak_dev"] for r in no_trust])
    ok = frac_sas >= 0.8 and rec_comp < rec_sas and frac_nt >= 0.7
    return ok, (f"peak lower than SAS in {frac_sas:.2f} of pairs; mean recovery {rec_comp:.2f} vs {rec_sas:.2f}; "
                f"peak lower than NoTrust at rho=0.3 in {frac_nt:.2f} of pairs")


def check_stability(config: Config, jobs: int | None = None) -> CheckResult:
    censor = config.controller.horizon - config.shock.injection_step
    return _timed("stability", lambda: evaluate_stability(*stability_batches(config, jobs), censor))


def check_determinism(config: Config, jobs: int | None = None, n_runs: int = 2) -> CheckResult:
    def run():
        cfg = dataclasses.replace(config, experiment=dataclasses.replace(config.experiment, n_runs=n_runs))
        blobs = []
        for _ in range(2):
            with tempfile.TemporaryDirectory() as tmp:
                write_outputs(tmp, run_batch(cfg, tmp, jobs), cfg)
                blobs.append((Path(tmp) / "summary.json").read_bytes())
        same = blobs[0] == blobs[1]
        json.loads(blobs[0])
        return same, f"summary.json identical across two invocations: {same} ({len(blobs[0])} bytes)"
    return _timed("determinism", run)


def fast_checks(config: Config | None = None) -> list[CheckResult]:
    config = config or load_config(environ={})
    return [
        check_trust_arithmetic(config.controller.trust),
        check_influence_bounds(),
        check_trust_properties(params=config.controller.trust),
        check_risk_properties(),
        check_optimizer_oracles(),
        check_recovery_oracle(epsilon=config.experiment.recovery_epsilon),
        check_baseline_reduction(config),
    ]


def run_checks(config: Config | None = None, full: bool = False, jobs: int | None = None) -> list[CheckResult]:
    config = config or load_config(environ={})
    results = fast_checks(config)
    if full:
        results += [check_detection(config, jobs), check_stability(config, jobs), check_determinism(config, jobs)]
    return results
