from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_psd
from mvf_composer.errors import InfeasibleProblemError, InvalidInputError
from mvf_composer.fixtures import stablecoin_universe
from mvf_composer.optimizer import (
    PortfolioProblem,
    kkt_check,
    load_json,
    markowitz_closed_form,
    project_to_feasible,
    save_json,
    solve,
)
from mvf_composer.verify import grid_minimum, interior_problem, random_constrained_problem


def problem(cov, mu, lam=2.5, prev=None, tau=math.inf, lo=0.0, hi=1.0):
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    prev = np.full(n, 1.0 / n) if prev is None else np.asarray(prev, dtype=float)
    return PortfolioProblem(cov, np.asarray(mu, dtype=float), lam, prev, tau, np.full(n, lo), np.full(n, hi))


def test_symmetric_problem_splits_evenly():
    sol = solve(problem(np.eye(2), [0.03, 0.03]))
    np.testing.assert_allclose(sol.weights, [0.5, 0.5], atol=1e-12)


def test_tilted_problem_matches_grid_search():
    p = problem(np.eye(2), [0.1, 0.0], lam=2.5)
    sol = solve(p)
    # Equalising marginal cost gives w1 - w2 = lam * 0.1 / 2.
    np.testing.assert_allclose(sol.weights, [0.5625, 0.4375], atol=1e-12)
    assert abs(sol.objective - grid_minimum(p)) <= 1e-6


def test_closed_form_hand_example():
    np.testing.assert_allclose(markowitz_closed_form(np.eye(2), [0.1, 0.0], 2.0), [0.55, 0.45])


@pytest.mark.parametrize("n", [2, 3, 7])
def test_closed_form_min_variance_is_equal_weight(n):
    np.testing.assert_allclose(markowitz_closed_form(np.eye(n), np.zeros(n), 3.0), np.full(n, 1 / n))


def test_closed_form_rejects_singular():
    with pytest.raises(InvalidInputError):
        markowitz_closed_form(np.ones((2, 2)), [0.0, 0.0], 1.0)


def test_default_bounds_hold_for_stablecoin_reserves(rng):
    u = stablecoin_universe()
    for _ in range(50):
        cov = random_psd(rng, 4) * 1e-5 + u.historical
        prev = project_to_feasible(rng.dirichlet(np.ones(4)), np.full(4, 0.05), np.full(4, 0.6))
        mu = rng.normal(0, 1e-3, 4)
        sol = solve(problem(cov, mu, prev=prev, tau=0.15, lo=0.05, hi=0.60))
        assert np.all(sol.weights >= 0.05 - 1e-9)
        assert np.all(sol.weights <= 0.60 + 1e-9)
        assert np.abs(sol.weights - prev).sum() <= 0.15 + 1e-8


def test_closed_form_passes_kkt(rng):
    p = interior_problem(rng, 5)
    w = markowitz_closed_form(p.covariance, p.expected_returns, p.risk_aversion)
    assert kkt_check(p, w).residual <= 1e-8


def test_perturbed_solution_fails_kkt(rng):
    p = interior_problem(rng, 4)
    sol = solve(p)
    shift = np.array([0.01, -0.01, 0.0, 0.0])
    moved = project_to_feasible(sol.weights + shift, p.lower_bounds, p.upper_bounds)
    report = kkt_check(p, moved)
    assert not report.passed
    assert report.residual > 1e-8


def test_inactive_constraints_carry_zero_multipliers():
    p = problem(np.diag([1.0, 2.0, 3.0]), [0.2, 0.0, -0.3], lam=2.0, lo=0.0, hi=0.6)
    sol = solve(p)
    report = kkt_check(p, sol)
    assert report.passed
    inactive_lo = sol.weights - p.lower_bounds > 1e-9
    inactive_hi = p.upper_bounds - sol.weights > 1e-9
    assert np.all(report.lower_multipliers[inactive_lo] == 0.0)
    assert np.all(report.upper_multipliers[inactive_hi] == 0.0)
    assert np.all(report.lower_multipliers >= 0) and np.all(report.upper_multipliers >= 0)


def test_infeasible_box_names_constraint():
    with pytest.raises(InfeasibleProblemError) as info:
        solve(problem(np.eye(3), np.zeros(3), lo=0.4))
    assert info.value.constraint == "budget+box"


def test_infeasible_turnover_names_constraint():
    p = PortfolioProblem(np.eye(2), np.zeros(2), 1.0, np.array([1.0, 0.0]), 0.1,
                         np.array([0.0, 0.3]), np.ones(2))
    with pytest.raises(InfeasibleProblemError) as info:
        solve(p)
    assert info.value.constraint == "turnover"


def test_non_psd_rejected():
    with pytest.raises(InvalidInputError):
        problem(np.diag([1.0, -1.0]), np.zeros(2))


def test_solution_independent_of_start(rng):
    p = problem(random_psd(rng, 4) + 0.1 * np.eye(4), rng.normal(0, 0.1, 4), lo=0.05, hi=0.6)
    starts = [np.full(4, 0.25), np.array([0.6, 0.3, 0.05, 0.05]), np.array([0.05, 0.05, 0.3, 0.6])]
    sols = [solve(p, x0=s).weights for s in starts]
    for w in sols[1:]:
        np.testing.assert_allclose(w, sols[0], atol=1e-8)


def test_infeasible_start_rejected():
    with pytest.raises(InvalidInputError):
        solve(problem(np.eye(2), np.zeros(2)), x0=[0.7, 0.7])


def test_turnover_limit_respected():
    p = problem(np.eye(3), [0.5, 0.0, 0.0], lam=5.0, prev=[0.1, 0.45, 0.45], tau=0.15)
    sol = solve(p)
    assert np.abs(sol.weights - p.prev_weights).sum() <= 0.15 + 1e-8
    assert sol.active_set.turnover


def test_singular_covariance_gets_ridge():
    sol = solve(problem(np.ones((3, 3)), [0.0, 0.01, 0.0], lo=0.0, hi=0.6))
    assert sol.ridge > 0
    assert sol.weights.sum() == pytest.approx(1.0)


def test_higher_stress_lowers_weight_on_stressed_asset():
    u = stablecoin_universe()
    stressed = np.argmax(np.diag(u.crisis) / np.diag(u.historical))
    weights = []
    for alpha in (0.0, 0.25, 0.5, 1.0):
        cov = (1 - alpha) * u.historical + alpha * u.crisis
        weights.append(solve(problem(cov, u.expected_returns, lo=0.05, hi=0.6)).weights[stressed])
    assert all(b <= a + 1e-9 for a, b in zip(weights, weights[1:]))


def test_json_round_trip(tmp_path, rng):
    p = problem(random_psd(rng, 3), rng.normal(size=3), tau=0.5, lo=0.05, hi=0.8)
    sol = solve(p)
    save_json(tmp_path / "p.json", p, sol)
    p2, sol2 = load_json(tmp_path / "p.json")
    np.testing.assert_array_equal(p2.covariance, p.covariance)
    assert p2.turnover_limit == p.turnover_limit
    np.testing.assert_array_equal(sol2.weights, sol.weights)
    assert sol2.active_set == sol.active_set


def test_json_keeps_unbounded_turnover(tmp_path):
    p = problem(np.eye(2), np.zeros(2))
    save_json(tmp_path / "p.json", p)
    p2, sol = load_json(tmp_path / "p.json")
    assert math.isinf(p2.turnover_limit) and sol is None


def test_projection_lands_in_box():
    w = project_to_feasible([0.9, 0.1, 0.0, 0.0], [0.05] * 4, [0.6] * 4)
    assert w.sum() == pytest.approx(1.0)
    assert w.min() >= 0.05 - 1e-12 and w.max() <= 0.6 + 1e-12


@given(st.integers(0, 2**31), st.integers(2, 3))
def test_constrained_problems_match_grid_and_kkt(seed, n):
    rng = np.random.default_rng(seed)
    p = random_constrained_problem(rng, n)
    sol = solve(p)
    assert kkt_check(p, sol).residual <= 1e-8
    assert sol.objective <= grid_minimum(p, step=1e-2) + 1e-9


@given(st.integers(0, 2**31), st.integers(2, 8))
def test_interior_problems_match_closed_form(seed, n):
    rng = np.random.default_rng(seed)
    p = interior_problem(rng, n)
    cf = markowitz_closed_form(p.covariance, p.expected_returns, p.risk_aversion)
    np.testing.assert_allclose(solve(p).weights, cf, atol=1e-8)
