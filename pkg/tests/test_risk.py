from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_psd
from mvf_composer.agents import ActionType, AgentId, AgentRecord, Archetype
from mvf_composer.errors import InvalidInputError, UndefinedRateError
from mvf_composer.risk import (
    adversarial_influence,
    agent_risk_state,
    aggregate_risk,
    blend_alpha,
    blend_alpha_derivative,
    blend_covariance,
    check_psd,
    estimate_stress_covariance,
    fragility_ratio,
    influence_bound,
    load_covariance,
    peg_contribution,
    rayleigh_bound,
    save_covariance,
    weyl_bounds,
)

AGENT = AgentId(0, Archetype.TRADER, False)


def rec(quantity, panic, action=ActionType.SELL):
    return AgentRecord(AGENT, 0, action, 0, quantity, "", panic, 0.5, 0.5, 0.0)


def test_agent_risk_calm():
    assert agent_risk_state(rec(0.0, 0.0, ActionType.HOLD), 50, 0.0) == 0.0


def test_agent_risk_saturated():
    assert agent_risk_state(rec(50.0, 1.0), 50, 0.02) == 1.0


def test_agent_risk_mean_of_terms():
    assert agent_risk_state(rec(15.0, 0.6), 50, 0.009, epsilon=0.01) == pytest.approx(0.6)


def test_agent_risk_ignores_stabilizing_flow():
    assert agent_risk_state(rec(0.0, 0.0, ActionType.HOLD), 50, -0.5) == 0.0


def test_agent_risk_rejects_bad_scale():
    with pytest.raises(InvalidInputError):
        agent_risk_state(rec(1.0, 0.0), 0.0, 0.0)


def test_peg_contribution_sign():
    # Selling below par widens the gap; buying narrows it.
    assert peg_contribution(rec(10.0, 0.0), -0.01, 1000.0) > 0
    assert peg_contribution(rec(-10.0, 0.0, ActionType.BUY), -0.01, 1000.0) < 0
    assert peg_contribution(rec(0.0, 0.0, ActionType.HOLD), -0.01, 1000.0) == 0.0


def test_aggregate_uniform_trust_is_plain_mean():
    assert aggregate_risk([0.1, 0.5, 0.9], [1, 1, 1]) == pytest.approx(0.5)


def test_aggregate_weighted_example():
    assert aggregate_risk([0.2, 0.8], [0.75, 0.25]) == pytest.approx(0.35)


def test_aggregate_single_agent():
    assert aggregate_risk([0.42], [0.3]) == 0.42


def test_aggregate_errors():
    with pytest.raises(UndefinedRateError):
        aggregate_risk([], [])
    with pytest.raises(InvalidInputError):
        aggregate_risk([0.1, 0.2], [1.0])


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(1e-3, 1)), min_size=1, max_size=20))
def test_aggregate_is_a_convex_combination(pairs):
    r, t = map(list, zip(*pairs))
    value = aggregate_risk(r, t)
    assert min(r) <= value <= max(r)


def test_influence_bound_worked_population():
    assert influence_bound(0.2, 0.35, 0.75) == pytest.approx(0.07 / 0.67)
    assert influence_bound(0.2, 0.35, 0.75) == pytest.approx(0.1045, abs=1e-4)


def test_sybil_influence():
    trust = [0.31] * 5 + [0.75] * 10
    labels = [True] * 5 + [False] * 10
    assert adversarial_influence(trust, labels) == pytest.approx(1.55 / 9.05)
    assert adversarial_influence(trust, labels) == pytest.approx(0.1713, abs=1e-4)


def test_no_adversaries_no_influence():
    assert adversarial_influence([0.5, 0.6], [False, False]) == 0.0


def test_stress_covariance_hand_computed():
    run = np.array([[1.0, -1.0], [-1.0, 1.0]] * 2)
    expected = np.array([[4 / 3, -4 / 3], [-4 / 3, 4 / 3]])
    np.testing.assert_allclose(estimate_stress_covariance([run]), expected)


def test_stress_covariance_constant_runs():
    run = np.full((5, 3), 0.01)
    np.testing.assert_array_equal(estimate_stress_covariance([run, run]), np.zeros((3, 3)))


def test_stress_covariance_errors():
    with pytest.raises(InvalidInputError):
        estimate_stress_covariance([])
    with pytest.raises(InvalidInputError):
        estimate_stress_covariance([np.zeros((1, 2))])


@pytest.mark.parametrize("r, alpha", [(0.0, 0.0), (1.0, 1.0), (0.5, 0.25)])
def test_blend_alpha_values(r, alpha):
    assert blend_alpha(r) == alpha


def test_blend_alpha_slope_at_half():
    assert blend_alpha_derivative(0.5) == 1.0


def test_blend_alpha_rejects_out_of_range():
    with pytest.raises(InvalidInputError):
        blend_alpha(1.5)


def test_blend_endpoints_are_exact(rng):
    h = random_psd(rng, 4)
    s = random_psd(rng, 4)
    np.testing.assert_array_equal(blend_covariance(h, s, 0.0).blended, h)
    np.testing.assert_array_equal(blend_covariance(h, s, 1.0).blended, s)


def test_blend_scalar_example():
    out = blend_covariance(np.eye(3), 7.17 * np.eye(3), 0.5)
    np.testing.assert_allclose(out.blended, 4.085 * np.eye(3))


def test_blend_rejects_bad_inputs():
    with pytest.raises(InvalidInputError):
        blend_covariance(np.eye(2), np.eye(3), 0.5)
    with pytest.raises(InvalidInputError):
        blend_covariance(np.eye(2), np.diag([1.0, -1.0]), 0.5)
    with pytest.raises(InvalidInputError):
        check_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))


@given(st.integers(0, 2**31), st.integers(2, 6), st.floats(0, 1))
def test_blend_is_psd_and_within_eigen_bounds(seed, n, alpha):
    rng = np.random.default_rng(seed)
    h = random_psd(rng, n)
    s = random_psd(rng, n, rank=max(1, n - 1))
    blended = blend_covariance(h, s, alpha).blended
    eig = np.linalg.eigvalsh(blended)
    lo, hi = weyl_bounds(h, s, alpha)
    scale = max(1.0, float(np.abs(eig).max()))
    assert eig[0] >= -1e-10 * scale
    assert eig[0] >= lo - 1e-9 * scale
    assert eig[-1] <= hi + 1e-9 * scale


@given(st.integers(0, 2**31), st.floats(0, 1), st.floats(0, 1))
def test_portfolio_variance_moves_monotonically_toward_stress(seed, a1, a2):
    rng = np.random.default_rng(seed)
    h = random_psd(rng, 4)
    s = random_psd(rng, 4)
    w = rng.dirichlet(np.ones(4))
    lo, hi = sorted((a1, a2))
    v_lo = w @ blend_covariance(h, s, lo).blended @ w
    v_hi = w @ blend_covariance(h, s, hi).blended @ w
    if w @ s @ w >= w @ h @ w:
        assert v_hi >= v_lo - 1e-9 * max(1.0, v_lo)
    else:
        assert v_hi <= v_lo + 1e-9 * max(1.0, v_lo)


@given(st.integers(0, 2**31), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_blend_alpha_is_convex(seed, x, y, theta):
    mid = theta * x + (1 - theta) * y
    assert blend_alpha(mid) <= theta * blend_alpha(x) + (1 - theta) * blend_alpha(y) + 1e-15


def test_fragility_identity():
    h = np.diag([2.0, 3.0])
    assert fragility_ratio([0.4, 0.6], h, h) == pytest.approx(1.0)


def test_fragility_stressed_axis():
    assert fragility_ratio([1.0, 0.0], np.eye(2), np.diag([12.0, 1.0])) == pytest.approx(12.0)


def test_fragility_zero_variance():
    with pytest.raises(UndefinedRateError):
        fragility_ratio([1.0, 0.0], np.diag([0.0, 1.0]), np.eye(2))


@given(st.integers(0, 2**31), st.integers(2, 6))
def test_fragility_below_rayleigh_bound(seed, n):
    rng = np.random.default_rng(seed)
    h = random_psd(rng, n) + 0.1 * np.eye(n)
    s = random_psd(rng, n)
    w = rng.dirichlet(np.ones(n))
    assert fragility_ratio(w, h, s) <= rayleigh_bound(h, s) * (1 + 1e-9)


def test_covariance_csv_round_trip(tmp_path, rng):
    m = random_psd(rng, 3)
    save_covariance(tmp_path / "cov.csv", m, ["a", "b", "c"])
    loaded, names = load_covariance(tmp_path / "cov.csv")
    np.testing.assert_array_equal(loaded, m)
    assert names == ["a", "b", "c"]


def test_covariance_csv_shape_checked(tmp_path):
    (tmp_path / "bad.csv").write_text("a,b\n1.0,0.0\n")
    with pytest.raises(InvalidInputError):
        load_covariance(tmp_path / "bad.csv")
