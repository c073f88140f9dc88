"""Synthetic four-stablecoin reserve universe.

Stands in for the historical price ingestion: a calm-period covariance
(what a backward-looking estimator sees) and a crisis covariance whose
trace is 7.17x larger, with most of the extra variance concentrated in
the asset that looks safest in calm markets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ASSET_NAMES = ("DAI", "USDC", "USDT", "TUSD")

# Per-step volatilities (daily analog).
CALM_VOLS = np.array([0.0020, 0.0016, 0.0010, 0.0024])
CRISIS_VOL_MULTIPLIERS = np.array([2.0, 1.8, 6.5, 1.6])
CALM_CORRELATION = 0.35
CRISIS_CORRELATION = 0.55
TRACE_RATIO = 7.17

# Per-step re-peg speed of each asset's price gap.
REPEG_SPEEDS = np.array([0.12, 0.15, 0.03, 0.12])
# Per-step expected returns (reserve yield); small next to the variances.
EXPECTED_RETURNS = np.array([2.0e-6, 1.5e-6, 2.5e-6, 1.0e-6])


def _corr_cov(vols: np.ndarray, rho: float) -> np.ndarray:
    n = len(vols)
    corr = np.full((n, n), rho)
    np.fill_diagonal(corr, 1.0)
    return corr * np.outer(vols, vols)


def calm_covariance() -> np.ndarray:
    return _corr_cov(CALM_VOLS, CALM_CORRELATION)


def crisis_covariance() -> np.ndarray:
    """Crisis covariance rescaled so its trace is ``TRACE_RATIO`` times the calm trace."""
    raw = _corr_cov(CALM_VOLS * CRISIS_VOL_MULTIPLIERS, CRISIS_CORRELATION)
    scale = TRACE_RATIO * np.trace(calm_covariance()) / np.trace(raw)
    return raw * scale


def crisis_loadings() -> np.ndarray:
    """Drawdown exposure of each asset to a basket shock.

    Proportional to crisis volatility and normalized to mean 1, so an equally
    weighted basket loses exactly the headline drawdown.
    """
    vols = np.sqrt(np.diag(crisis_covariance()))
    return vols / vols.mean()


@dataclass(frozen=True)
class ReserveUniverse:
    names: tuple[str, ...]
    historical: np.ndarray
    crisis: np.ndarray
    loadings: np.ndarray
    repeg_speeds: np.ndarray
    expected_returns: np.ndarray

    @property
    def n_assets(self) -> int:
        return len(self.names)


def stablecoin_universe() -> ReserveUniverse:
    return ReserveUniverse(
        names=ASSET_NAMES,
        historical=calm_covariance(),
        crisis=crisis_covariance(),
        loadings=crisis_loadings(),
        repeg_speeds=REPEG_SPEEDS.copy(),
        expected_returns=EXPECTED_RETURNS.copy(),
    )
