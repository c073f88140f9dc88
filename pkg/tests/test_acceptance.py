"""Acceptance suite: one test per criterion, each reporting a pass/fail line.

The simulation criteria (7, 8, 10) run the quick preset on one process and
take a few minutes in total.
"""

from __future__ import annotations

import os
import time
from pathlib import Path

import pytest

from mvf_composer.agents import TimingMode
from mvf_composer.cli import cmd_run
from mvf_composer.config import load_config
from mvf_composer.trust import TrustParams, trust_score
from mvf_composer.verify import (
    REFERENCE_FEATURES,
    SIGMOID_REFERENCE,
    check_baseline_reduction,
    check_influence_bounds,
    check_optimizer_oracles,
    check_recovery_oracle,
    check_risk_properties,
    check_trust_properties,
    detection_batch,
    evaluate_detection,
    evaluate_stability,
    stability_batches,
)

JOBS = 1


@pytest.fixture(scope="module")
def quick():
    return load_config(preset="quick", environ={})


def _check(report, number, result, budget):
    passed = result.passed and result.seconds < budget
    report(number, passed, f"{result.name}: {result.detail}; budget {budget}s", result.seconds)
    assert result.passed, result.detail
    assert result.seconds < budget


def test_criterion_01_trust_arithmetic(report_criterion):
    params = TrustParams(weights=(1.5, 1.5, 2.0, 1.0), bias=0.0)
    start = time.perf_counter()
    value = trust_score(REFERENCE_FEATURES, params)
    seconds = time.perf_counter() - start
    passed = abs(value - SIGMOID_REFERENCE) <= 1e-5 and seconds < 1e-3
    report_criterion(1, passed, f"trust score {value:.6f} vs {SIGMOID_REFERENCE} +/- 1e-5; budget 1ms", seconds)
    assert value == pytest.approx(SIGMOID_REFERENCE, abs=1e-5)
    assert seconds < 1e-3


def test_criterion_02_influence_bounds(report_criterion):
    _check(report_criterion, 2, check_influence_bounds(), 1.0)


def test_criterion_03_trust_properties(report_criterion):
    _check(report_criterion, 3, check_trust_properties(n=1000), 10.0)


def test_criterion_04_risk_properties(report_criterion):
    _check(report_criterion, 4, check_risk_properties(n=1000), 30.0)


def test_criterion_05_optimizer_oracles(report_criterion):
    _check(report_criterion, 5, check_optimizer_oracles(n_interior=200, n_grid=50), 120.0)


def test_criterion_06_recovery_oracle(report_criterion):
    _check(report_criterion, 6, check_recovery_oracle(n=100), 5.0)


def test_criterion_07_detection(report_criterion, quick):
    ctl = quick.controller
    assert quick.experiment.n_runs == 100
    assert ctl.population.size == 12 and ctl.population.n_attackers == 2
    assert ctl.attack.coordination >= 0.8 and ctl.attack.timing_mode == TimingMode.ON_STRESS
    start = time.perf_counter()
    results = detection_batch(quick, JOBS)
    passed, detail = evaluate_detection(results, ctl.trust.threshold)
    seconds = time.perf_counter() - start
    report_criterion(7, passed and seconds < 300, detail + "; budget 300s", seconds)
    assert passed, detail
    assert seconds < 300


def test_criterion_08_directional_stability(report_criterion, quick):
    start = time.perf_counter()
    sas_pairs, rho_pairs = stability_batches(quick, JOBS)
    censor = quick.controller.horizon - quick.shock.injection_step
    passed, detail = evaluate_stability(sas_pairs, rho_pairs, censor)
    seconds = time.perf_counter() - start
    report_criterion(8, passed and seconds < 600, detail + "; budget 600s", seconds)
    assert passed, detail
    assert seconds < 600


def test_criterion_09_baseline_reduction(report_criterion, quick):
    _check(report_criterion, 9, check_baseline_reduction(quick), 10.0)


def test_criterion_10_determinism(report_criterion, tmp_path, monkeypatch):
    for key in [k for k in os.environ if k.startswith("MVF__")]:
        monkeypatch.delenv(key)
    blobs, times = [], []
    for name in ("first", "second"):
        start = time.perf_counter()
        assert cmd_run(None, str(tmp_path / name), seed=42, preset="quick", jobs=JOBS) == 0
        times.append(time.perf_counter() - start)
        blobs.append(Path(tmp_path / name / "summary.json").read_bytes())
    identical = blobs[0] == blobs[1]
    # Each invocation must stay within twice the runtime of a plain preset run.
    within = max(times) < 2 * min(times)
    report_criterion(10, identical and within,
                     f"summary.json byte-identical: {identical} ({len(blobs[0])} bytes); "
                     f"run times {times[0]:.1f}s / {times[1]:.1f}s", sum(times))
    assert identical
    assert within
