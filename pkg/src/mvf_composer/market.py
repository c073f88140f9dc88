"""Market state, shock injection, news stream and one-step peg dynamics.

Sign conventions: ``peg_deviation`` is stablecoin price minus par, so sell
pressure pushes it negative. Order flow is signed capital, positive = sell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError
from .fixtures import stablecoin_universe


class ShockKind(str, Enum):
    NORMAL = "Normal"
    PRICE_SHOCK = "PriceShock"
    SENTIMENT_SHOCK = "SentimentShock"
    BLACK_THURSDAY = "BlackThursday"


@dataclass(frozen=True)
class ShockSpec:
    kind: ShockKind = ShockKind.NORMAL
    injection_step: int = 30
    price_drawdown: float = 0.0
    sentiment_target: float = 0.0
    liquidity_withdrawal: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ShockKind(self.kind))
        if self.injection_step < 0:
            raise InvalidInputError("injection_step must be >= 0")
        for name in ("price_drawdown", "liquidity_withdrawal"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidInputError(f"{name} must lie in [0, 1], got {value}")
        if not -1.0 <= self.sentiment_target <= 1.0:
            raise InvalidInputError("sentiment_target must lie in [-1, 1]")

    @property
    def moves_prices(self) -> bool:
        return self.kind in (ShockKind.PRICE_SHOCK, ShockKind.BLACK_THURSDAY)

    @property
    def moves_sentiment(self) -> bool:
        return self.kind in (ShockKind.SENTIMENT_SHOCK, ShockKind.BLACK_THURSDAY)

    @classmethod
    def normal(cls, injection_step: int = 30) -> ShockSpec:
        return cls(ShockKind.NORMAL, injection_step)

    @classmethod
    def price_shock(cls, injection_step: int = 30, drawdown: float = 0.10) -> ShockSpec:
        return cls(ShockKind.PRICE_SHOCK, injection_step, price_drawdown=drawdown)

    @classmethod
    def sentiment_shock(cls, injection_step: int = 30, target: float = -0.8) -> ShockSpec:
        return cls(ShockKind.SENTIMENT_SHOCK, injection_step, sentiment_target=target)

    @classmethod
    def black_thursday(
        cls,
        injection_step: int = 30,
        drawdown: float = 0.15,
        target: float = -0.8,
        withdrawal: float = 0.1,
    ) -> ShockSpec:
        return cls(ShockKind.BLACK_THURSDAY, injection_step, drawdown, target, withdrawal)

    @classmethod
    def from_kind(cls, kind: ShockKind | str, injection_step: int = 30, **overrides) -> ShockSpec:
        factories = {
            ShockKind.NORMAL: cls.normal,
            ShockKind.PRICE_SHOCK: cls.price_shock,
            ShockKind.SENTIMENT_SHOCK: cls.sentiment_shock,
            ShockKind.BLACK_THURSDAY: cls.black_thursday,
        }
        spec = factories[ShockKind(kind)](injection_step)
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return replace(spec, **overrides) if overrides else spec


@dataclass(frozen=True)
class NewsEvent:
    headline: str
    polarity: float
    relevance: tuple[float, ...]

    def __post_init__(self):
        if not -1.0 <= self.polarity <= 1.0:
            raise InvalidInputError(f"polarity must lie in [-1, 1], got {self.polarity}")
        if any(not 0.0 <= r <= 1.0 for r in self.relevance):
            raise InvalidInputError("relevance entries must lie in [0, 1]")

    @classmethod
    def neutral(cls, n_assets: int = 4) -> NewsEvent:
        return cls("Markets quiet", 0.0, (0.0,) * n_assets)


def _psd_factor(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _default_universe_field(name):
    return field(default_factory=lambda: getattr(stablecoin_universe(), name))


@dataclass(frozen=True, eq=False)
class MarketParams:
    """Constants of the simulated market. All per-step unless noted."""

    reversion: float = 0.23
    impact: float = 0.5
    peg_noise: float = 0.002
    # Share of the collateral shortfall (1 - collateral/supply) priced into the
    # peg: the deviation reverts toward -passthrough * shortfall instead of 0.
    shortfall_passthrough: float = 1.0
    sentiment_memory: float = 0.8
    liquidity_floor: float = 1.0
    stress_decay: float = 0.9
    vol_decay: float = 0.94
    periods_per_year: int = 365
    initial_liquidity: float = 3.0e4
    initial_supply: float = 1.0e6
    initial_collateral_ratio: float = 1.1
    calm_covariance: np.ndarray = _default_universe_field("historical")
    crisis_covariance: np.ndarray = _default_universe_field("crisis")
    loadings: np.ndarray = _default_universe_field("loadings")
    repeg_speeds: np.ndarray = _default_universe_field("repeg_speeds")
    _calm_chol: np.ndarray = field(init=False, repr=False, compare=False)
    _crisis_chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("calm_covariance", "crisis_covariance", "loadings", "repeg_speeds"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "_calm_chol", _psd_factor(self.calm_covariance))
        object.__setattr__(self, "_crisis_chol", _psd_factor(self.crisis_covariance))

    def __eq__(self, other):
        if not isinstance(other, MarketParams):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f.name), getattr(other, f.name))
            for f in fields(self) if f.compare
        )

    __hash__ = None

    def return_shocks(self, rng: np.random.Generator, stress: float) -> np.ndarray:
        """Draw gap innovations with covariance (1-s)*calm + s*crisis."""
        z = rng.standard_normal(2 * self.n_assets)
        n = self.n_assets
        return math.sqrt(1.0 - stress) * (self._calm_chol @ z[:n]) + math.sqrt(stress) * (self._crisis_chol @ z[n:])

    @property
    def n_assets(self) -> int:
        return len(self.loadings)


@dataclass(frozen=True)
class MarketState:
    step: int
    peg_deviation: float
    prices: tuple[float, ...]
    sentiment: float
    pool_liquidity: float
    stablecoin_supply: float
    collateral_value: float
    volatility: float
    reserve_units: tuple[float, ...] = ()
    # 0 = calm noise regime, 1 = full crisis regime.
    stress_level: float = 0.0

    def __post_init__(self):
        if not -1.0 <= self.sentiment <= 1.0:
            raise InvalidInputError("sentiment must lie in [-1, 1]")
        if self.pool_liquidity < 0:
            raise InvalidInputError("pool_liquidity must be non-negative")
        if any(p <= 0 for p in self.prices):
            raise InvalidInputError("asset prices must be positive")

    @property
    def collateral_ratio(self) -> float:
        if self.stablecoin_supply <= 0:
            return math.inf
        return self.collateral_value / self.stablecoin_supply

    def reserve_weights(self) -> np.ndarray:
        values = np.asarray(self.reserve_units) * np.asarray(self.prices)
        total = values.sum()
        if total <= 0:
            return np.full(len(self.prices), 1.0 / len(self.prices))
        return values / total


def initial_state(params: MarketParams | None = None, weights: Sequence[float] | None = None) -> MarketState:
    params = params or MarketParams()
    n = params.n_assets
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    collateral = params.initial_supply * params.initial_collateral_ratio
    daily_var = float(w @ params.calm_covariance @ w)
    return MarketState(
        step=0,
        peg_deviation=0.0,
        prices=(1.0,) * n,
        sentiment=0.0,
        pool_liquidity=params.initial_liquidity,
        stablecoin_supply=params.initial_supply,
        collateral_value=collateral,
        volatility=math.sqrt(daily_var * params.periods_per_year),
        reserve_units=tuple(float(x) for x in w * collateral),
        stress_level=0.0,
    )


def rebalance(state: MarketState, weights: Sequence[float]) -> MarketState:
    """Re-split the collateral at current prices; total value is unchanged."""
    prices = np.asarray(state.prices)
    units = np.asarray(weights, dtype=float) * state.collateral_value / prices
    return replace(state, reserve_units=tuple(float(u) for u in units))


def apply_shock(state: MarketState, shock: ShockSpec, params: MarketParams) -> MarketState:
    """Apply ``shock`` to ``state`` unconditionally."""
    prices = np.asarray(state.prices)
    sentiment = state.sentiment
    liquidity = state.pool_liquidity
    stress = state.stress_level
    if shock.moves_prices and shock.price_drawdown > 0:
        hit = np.clip(shock.price_drawdown * params.loadings, 0.0, 0.99)
        prices = prices * (1.0 - hit)
        stress = 1.0
    if shock.moves_sentiment:
        sentiment = shock.sentiment_target
    if shock.liquidity_withdrawal > 0:
        liquidity = liquidity * (1.0 - shock.liquidity_withdrawal)
    collateral = float(np.dot(state.reserve_units, prices)) if state.reserve_units else state.collateral_value
    return replace(
        state,
        prices=tuple(float(p) for p in prices),
        sentiment=float(sentiment),
        pool_liquidity=float(liquidity),
        collateral_value=collateral,
        stress_level=stress,
    )


def step_market(
    state: MarketState,
    net_flow: Sequence[float],
    news: NewsEvent,
    shock: Optional[ShockSpec] = None,
    *,
    params: MarketParams | None = None,
    rng: np.random.Generator | None = None,
    withdrawn: float = 0.0,
    minted: float = 0.0,
) -> MarketState:
    """Advance the market one step.

    ``net_flow`` is signed sell pressure per asset pool. ``withdrawn`` is LP
    capital leaving the pool and ``minted`` the net stablecoin issued at par
    (negative for redemptions). Without ``rng`` the step is noise-free.
    """
    params = params or MarketParams()
    flow = np.asarray(net_flow, dtype=float)
    if not np.all(np.isfinite(flow)) or not math.isfinite(withdrawn) or not math.isfinite(minted):
        raise InvalidInputError("order flow must be finite")

    if shock is not None and shock.kind != ShockKind.NORMAL and shock.injection_step == state.step:
        state = apply_shock(state, shock, params)

    old_prices = np.asarray(state.prices)
    units = np.asarray(state.reserve_units) if state.reserve_units else None
    stress = state.stress_level

    gaps = (1.0 - params.repeg_speeds) * (old_prices - 1.0)
    peg_shock = 0.0
    if rng is not None:
        gaps = gaps + params.return_shocks(rng, stress)
        peg_shock = params.peg_noise * rng.standard_normal()
    prices = np.maximum(1.0 + gaps, 1e-6)

    supply = state.stablecoin_supply
    if units is not None:
        collateral = float(units @ prices)
    else:
        collateral = state.collateral_value * float(np.mean(prices / old_prices))
    if minted != 0.0 and units is not None:
        # Issuance adds reserves at par in the current mix; redemptions pay out of it.
        weights = units * prices / max(collateral, 1e-12)
        paid = max(minted, -collateral)
        units = units + weights * paid / prices
        collateral = float(units @ prices)
    supply = max(supply + minted, 0.0)

    liquidity = max(state.pool_liquidity - max(withdrawn, 0.0), 0.0)
    depth = max(liquidity, params.liquidity_floor)
    ratio = collateral / supply if supply > 0 else math.inf
    anchor = -params.shortfall_passthrough * max(0.0, 1.0 - ratio)
    peg = (
        anchor
        + (1.0 - params.reversion) * (state.peg_deviation - anchor)
        - params.impact * float(flow.sum()) / depth
        + peg_shock
    )

    sentiment = params.sentiment_memory * state.sentiment + (1.0 - params.sentiment_memory) * news.polarity
    sentiment = min(1.0, max(-1.0, sentiment))

    if units is not None:
        prev_values = np.asarray(state.reserve_units) * old_prices
        base = prev_values.sum()
        port_return = float(np.asarray(state.reserve_units) @ prices) / base - 1.0 if base > 0 else 0.0
    else:
        port_return = 0.0
    var = state.volatility**2 / params.periods_per_year
    var = params.vol_decay * var + (1.0 - params.vol_decay) * port_return**2
    volatility = math.sqrt(var * params.periods_per_year)

    return MarketState(
        step=state.step + 1,
        peg_deviation=float(peg),
        prices=tuple(float(p) for p in prices),
        sentiment=float(sentiment),
        pool_liquidity=float(liquidity),
        stablecoin_supply=float(supply),
        collateral_value=float(collateral),
        volatility=volatility,
        reserve_units=tuple(float(u) for u in units) if units is not None else (),
        stress_level=stress * params.stress_decay,
    )


def asset_returns(states: Sequence[MarketState]) -> np.ndarray:
    """Per-step simple returns of the reserve assets, shape (len(states)-1, n)."""
    prices = np.array([s.prices for s in states])
    return prices[1:] / prices[:-1] - 1.0


# Headline templates; polarity is drawn separately so text carries no numbers.
_CALM_POSITIVE = (
    "Reserve attestation published on schedule",
    "Exchange volumes steady across stablecoin pairs",
    "New payment integration announced for {asset}",
    "Lending rates stable as demand for {asset} grows",
)
_CALM_NEGATIVE = (
    "Regulator requests comment on stablecoin disclosures",
    "Minor outflows from {asset} pools overnight",
    "Analysts question concentration of {asset} reserves",
    "Fee spike on settlement layer slows transfers",
)
_CRISIS = (
    "Collateral prices tumble as liquidations cascade",
    "Redemption queue grows for {asset}",
    "Liquidity providers pull capital from {asset} pools",
    "Rumors of reserve shortfall spread across forums",
    "Peg wobbles as sell orders swamp {asset} market",
)


def generate_news(
    rng_seed: int,
    step: int,
    shock: Optional[ShockSpec] = None,
    n_assets: int = 4,
    asset_names: Sequence[str] | None = None,
    crisis_duration: int = 15,
) -> NewsEvent:
    """Deterministic news item for ``(rng_seed, step, shock)``.

    While a sentiment-carrying shock is live (``crisis_duration`` steps from
    injection) polarity comes from a negative pool in [-0.9, -0.55]; otherwise
    it is symmetric around zero.
    """
    rng = np.random.default_rng([abs(int(rng_seed)), int(step)])
    names = asset_names or [f"asset {i}" for i in range(n_assets)]
    focus = int(rng.integers(n_assets))
    relevance = rng.uniform(0.0, 0.3, size=n_assets)
    relevance[focus] = rng.uniform(0.7, 1.0)
    crisis = (
        shock is not None
        and shock.moves_sentiment
        and shock.injection_step <= step < shock.injection_step + crisis_duration
    )
    u = rng.random()
    if crisis:
        polarity = -0.9 + 0.35 * u
        template = _CRISIS[int(rng.integers(len(_CRISIS)))]
    else:
        polarity = 0.6 * (2.0 * u - 1.0)
        pool = _CALM_POSITIVE if polarity >= 0 else _CALM_NEGATIVE
        template = pool[int(rng.integers(len(pool)))]
    return NewsEvent(
        headline=template.format(asset=names[focus]),
        polarity=float(polarity),
        relevance=tuple(float(r) for r in relevance),
    )
