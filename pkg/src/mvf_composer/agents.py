"""Agent population: regime-aware mock policies and an external-backend adapter.

Every policy owns a private generator and draws a fixed-size block of random
numbers per ``act`` call, whatever branch it takes. Two runs that share a seed
therefore keep their agent streams aligned even when market states diverge,
which is what makes paired-seed comparisons between controllers meaningful.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import InvalidInputError
from .market import MarketState, NewsEvent

log = logging.getLogger(__name__)


class Archetype(str, Enum):
    TRADER = "Trader"
    LIQUIDITY_PROVIDER = "LiquidityProvider"
    ARBITRAGEUR = "Arbitrageur"
    ATTACKER = "Attacker"


class ActionType(str, Enum):
    BUY = "Buy"
    SELL = "Sell"
    HOLD = "Hold"
    WITHDRAW = "Withdraw"
    MINT = "Mint"
    REDEEM = "Redeem"


class TimingMode(str, Enum):
    ALWAYS = "Always"
    ON_STRESS = "OnStress"
    PRE_SHOCK = "PreShock"


@dataclass(frozen=True)
class AgentId:
    index: int
    archetype: Archetype
    adversarial: bool

    def __post_init__(self):
        object.__setattr__(self, "archetype", Archetype(self.archetype))
        if self.adversarial != (self.archetype == Archetype.ATTACKER):
            raise InvalidInputError("adversarial must be true exactly for attackers")

    @property
    def label(self) -> str:
        return f"{self.archetype.value}-{self.index}"


@dataclass(frozen=True, slots=True)
class AgentRecord:
    agent: AgentId
    step: int
    action_type: ActionType
    asset: int
    quantity: float
    rationale: str
    panic_level: float
    risk_appetite: float
    peg_confidence: float
    stated_sentiment: float

    def __post_init__(self):
        for name in ("panic_level", "risk_appetite", "peg_confidence"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidInputError(f"{name} must lie in [0, 1], got {value}")
        if not -1.0 <= self.stated_sentiment <= 1.0:
            raise InvalidInputError(f"stated_sentiment must lie in [-1, 1], got {self.stated_sentiment}")
        if not math.isfinite(self.quantity):
            raise InvalidInputError("quantity must be finite")

    @property
    def position_change(self) -> float:
        """Signed change in stablecoin holdings; buys are positive."""
        return -self.quantity

    def to_json(self) -> dict[str, Any]:
        return {
            "action_type": self.action_type.value,
            "asset": self.asset,
            "quantity": self.quantity,
            "rationale": self.rationale,
            "panic_level": self.panic_level,
            "peg_confidence": self.peg_confidence,
        }


@dataclass(frozen=True)
class AttackConfig:
    coordination: float = 0.9
    injection_strength: float = 0.8
    timing_mode: TimingMode = TimingMode.ON_STRESS

    def __post_init__(self):
        object.__setattr__(self, "timing_mode", TimingMode(self.timing_mode))
        for name in ("coordination", "injection_strength"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidInputError(f"{name} must lie in [0, 1], got {value}")


# Table of expected trust-feature ranges per archetype (f1, f2, f3, f4).
_ENVELOPES: dict[Archetype, dict[str, tuple[float, float]]] = {
    Archetype.TRADER: {"f1": (0.5, 0.9), "f2": (0.6, 0.9), "f3": (0.1, 0.3), "f4": (-0.1, 0.2)},
    Archetype.LIQUIDITY_PROVIDER: {"f1": (0.4, 0.8), "f2": (0.7, 0.95), "f3": (0.15, 0.35), "f4": (-0.2, 0.15)},
    Archetype.ARBITRAGEUR: {"f1": (0.6, 0.95), "f2": (0.8, 0.98), "f3": (0.2, 0.4), "f4": (-0.3, 0.1)},
    Archetype.ATTACKER: {"f1": (-0.3, 0.3), "f2": (0.2, 0.5), "f3": (0.5, 0.9), "f4": (0.4, 0.85)},
}


def expected_feature_envelope(archetype: Archetype | str) -> dict[str, tuple[float, float]]:
    return dict(_ENVELOPES[Archetype(archetype)])


def _clip(x: float, lo: float = -1.0, hi: float = 1.0) -> float:
    return lo if x < lo else hi if x > hi else x


def panic_level(state: MarketState, sensitivity: float, noise: float = 0.0) -> float:
    """Logistic panic in peg distress, bearish sentiment and volatility."""
    dev = min(abs(state.peg_deviation) / 0.01, 6.0)
    bear = max(0.0, -state.sentiment)
    vol = min(state.volatility / 0.1, 3.0)
    x = -3.5 + sensitivity * (0.5 * dev + 3.0 * bear + 1.0 * vol) + 0.3 * noise
    return 1.0 / (1.0 + math.exp(-x))


def _peg_confidence(state: MarketState, panic: float) -> float:
    return _clip(1.0 - abs(state.peg_deviation) / 0.05 - 0.5 * panic, 0.0, 1.0)


@dataclass(frozen=True)
class AgentProfile:
    risk_appetite: float
    panic_sensitivity: float
    size: float
    threshold: float
    preferred_asset: int


class AgentPolicy:
    """Base policy: a labelled agent with a private random stream."""

    block = 4

    def __init__(self, agent: AgentId, profile: AgentProfile, rng: np.random.Generator, n_assets: int):
        self.agent = agent
        self.profile = profile
        self.rng = rng
        self.n_assets = n_assets

    def _draws(self) -> tuple[np.ndarray, np.ndarray]:
        return self.rng.standard_normal(self.block), self.rng.random(self.block)

    def act(self, state: MarketState, news: NewsEvent) -> AgentRecord:
        raise NotImplementedError

    def _record(self, state, action, asset, qty, rationale, panic, phi) -> AgentRecord:
        return AgentRecord(
            agent=self.agent,
            step=state.step,
            action_type=action,
            asset=int(asset),
            quantity=float(qty),
            rationale=rationale,
            panic_level=float(panic),
            risk_appetite=float(_clip(self.profile.risk_appetite * (1.0 - panic), 0.0, 1.0)),
            peg_confidence=float(_peg_confidence(state, panic)),
            stated_sentiment=float(_clip(phi)),
        )


# Share of the pool an LP pulls per panicked step, split across LPs.
LP_WITHDRAW_FRACTION = 0.01
# All LPs supply the same stablecoin pool, quoted against the first reserve asset.
LP_POOL_ASSET = 0
LP_NEWS_WEIGHT = 0.5
LP_VIEW_NOISE = 0.15
LP_EXECUTION_NOISE = 0.35
ARB_SIZE_RANGE = (0.10, 0.20)
ARB_SHARED_ASSET = 0.5
ARB_THRESHOLD_RANGE = (0.0015, 0.003)

TRADER_SENTIMENT_WEIGHT = 0.4
# Order size multiplier at full panic is 1 + PANIC_SIZE_BOOST.
PANIC_SIZE_BOOST = 1.0
TRADER_NEWS_WEIGHT = 0.5
TRADER_VIEW_NOISE = 0.3
# Slow structural outflow: holders cash out slightly more than they buy.
TRADER_OUTFLOW_BIAS = 0.025


def _trader_view(state: MarketState, news: NewsEvent, asset: int, panic: float, noise: float) -> float:
    relevance = news.relevance[asset] if asset < len(news.relevance) else 0.0
    view = (
        TRADER_SENTIMENT_WEIGHT * state.sentiment
        + TRADER_NEWS_WEIGHT * news.polarity * (0.5 + 0.5 * relevance)
        + TRADER_VIEW_NOISE * noise
        - TRADER_OUTFLOW_BIAS
        - 0.5 * max(0.0, panic - 0.3)
    )
    return _clip(view)


class TraderPolicy(AgentPolicy):
    """Trades in the direction of its own (noisy) sentiment; panic scales size."""

    execution_noise = 0.47
    # Share of orders placed in the asset the news item is about.
    news_focus = 0.85

    def _pick_asset(self, news: NewsEvent, u0: float, u1: float) -> int:
        if u0 < self.news_focus and news.relevance:
            return int(np.argmax(news.relevance))
        return self.profile.preferred_asset if u1 < 0.5 else int(2.0 * (u1 - 0.5) * self.n_assets) % self.n_assets

    def quantity_for(self, stated_sentiment: float, panic: float = 0.0) -> float:
        """Signed order size for a given stated sentiment, using the trader's own noise."""
        z, _ = self._draws()
        return -self.profile.size * (1.0 + PANIC_SIZE_BOOST * panic) * (stated_sentiment + self.execution_noise * z[2])

    def act(self, state: MarketState, news: NewsEvent) -> AgentRecord:
        z, u = self._draws()
        panic = panic_level(state, self.profile.panic_sensitivity, z[0])
        asset = self._pick_asset(news, u[0], u[1])
        phi = _trader_view(state, news, asset, panic, z[1])
        qty = -self.profile.size * (1.0 + PANIC_SIZE_BOOST * panic) * (phi + self.execution_noise * z[2])
        if qty > 0:
            return self._record(state, ActionType.SELL, asset, qty, "Reducing exposure on weak outlook", panic, phi)
        return self._record(state, ActionType.BUY, asset, qty, "Adding exposure on positive outlook", panic, phi)


class LiquidityProviderPolicy(AgentPolicy):
    """Makes small sentiment-consistent trades in its pool; withdraws capital when panicked."""

    def __init__(self, agent, profile, rng, n_assets, n_lps: int = 1,
                 withdraw_fraction: float = LP_WITHDRAW_FRACTION):
        super().__init__(agent, profile, rng, n_assets)
        self.n_lps = max(1, n_lps)
        self.withdraw_fraction = withdraw_fraction

    def act(self, state: MarketState, news: NewsEvent) -> AgentRecord:
        z, _ = self._draws()
        panic = panic_level(state, self.profile.panic_sensitivity, z[0])
        asset = self.profile.preferred_asset
        if panic > self.profile.threshold:
            phi = _clip(0.45 * state.sentiment + 0.3 * news.polarity - 0.5 * panic + 0.2 * z[1])
            qty = self.withdraw_fraction * state.pool_liquidity / self.n_lps
            return self._record(state, ActionType.WITHDRAW, asset, qty, "Pulling liquidity until volatility eases", panic, phi)
        phi = _clip(0.4 * state.sentiment + LP_NEWS_WEIGHT * news.polarity + LP_VIEW_NOISE * z[1])
        qty = -self.profile.size * (phi + LP_EXECUTION_NOISE * z[2])
        action = ActionType.SELL if qty > 0 else ActionType.BUY
        return self._record(state, action, asset, qty, "Rebalancing pool inventory", panic, phi)


class ArbitrageurPolicy(AgentPolicy):
    """Mints above par, redeems below par, sized to close part of the gap."""

    market_making_rate = 0.4

    def __init__(self, agent, profile, rng, n_assets, impact: float = 0.5):
        super().__init__(agent, profile, rng, n_assets)
        self.impact = impact

    def act(self, state: MarketState, news: NewsEvent) -> AgentRecord:
        z, u = self._draws()
        panic = panic_level(state, self.profile.panic_sensitivity, z[0])
        dev = state.peg_deviation
        # Mint and redeem against the reserve asset furthest from par.
        gaps = [abs(p - 1.0) for p in state.prices]
        if u[1] < ARB_SHARED_ASSET and max(gaps) > 0:
            asset = gaps.index(max(gaps))
        else:
            asset = self.profile.preferred_asset
        if abs(dev) > self.profile.threshold:
            depth = max(state.pool_liquidity, 1.0)
            qty = self.profile.size * abs(dev) * depth / self.impact * max(0.2, 1.0 + 0.2 * z[2])
            phi = _clip(-dev / 0.02 + 0.15 * z[1])
            if dev < 0:
                return self._record(state, ActionType.REDEEM, asset, -qty, "Buying below par to redeem", panic, phi)
            return self._record(state, ActionType.MINT, asset, qty, "Minting at par to sell above peg", panic, phi)
        if u[0] < self.market_making_rate:
            # Small inventory trade unrelated to the peg.
            qty = 5.0 * z[2]
            phi = _clip(-0.01 * qty + 0.15 * z[1])
            action = ActionType.SELL if qty > 0 else ActionType.BUY
            return self._record(state, action, asset, qty, "Adjusting inventory", panic, phi)
        return self._record(state, ActionType.HOLD, asset, 0.0, "No arbitrage opportunity", panic, 0.0)


class CoordinationChannel:
    """Shared per-step action template broadcast to all attackers of a run.

    The template churns: mostly sells, some buys to shake the peg both ways,
    and pauses.
    """

    def __init__(self, seed: int, n_assets: int, sell_probability: float = 0.55,
                 buy_probability: float = 0.2, size_range=(60.0, 180.0)):
        self.seed = seed
        self.n_assets = n_assets
        self.sell_probability = sell_probability
        self.buy_probability = buy_probability
        self.size_range = size_range
        self._cache: dict[int, tuple[ActionType, int, float]] = {}

    def template(self, step: int) -> tuple[ActionType, int, float]:
        if step not in self._cache:
            rng = np.random.default_rng([abs(int(self.seed)), int(step), 7])
            u = rng.random(3)
            asset = int(u[1] * self.n_assets)
            lo, hi = self.size_range
            size = lo + (hi - lo) * u[2]
            if u[0] < self.sell_probability:
                self._cache[step] = (ActionType.SELL, asset, size)
            elif u[0] < self.sell_probability + self.buy_probability:
                self._cache[step] = (ActionType.BUY, asset, -0.5 * size)
            else:
                self._cache[step] = (ActionType.HOLD, asset, 0.0)
        return self._cache[step]


class AttackerPolicy(AgentPolicy):
    """Coordinated seller that under-reports its panic and talks the market up."""

    stress_deviation = 0.004
    stress_sentiment = -0.3
    pre_shock_lead = 5

    def __init__(self, agent, profile, rng, n_assets, attack: AttackConfig, channel: CoordinationChannel,
                 shock_step: Optional[int] = None):
        super().__init__(agent, profile, rng, n_assets)
        self.attack = attack
        self.channel = channel
        self.shock_step = shock_step

    def is_active(self, state: MarketState) -> bool:
        mode = self.attack.timing_mode
        if mode == TimingMode.ALWAYS:
            return True
        if mode == TimingMode.PRE_SHOCK:
            if self.shock_step is None:
                return False
            return self.shock_step - self.pre_shock_lead <= state.step < self.shock_step
        return abs(state.peg_deviation) >= self.stress_deviation or state.sentiment <= self.stress_sentiment

    def act(self, state: MarketState, news: NewsEvent) -> AgentRecord:
        z, u = self._draws()
        # Attackers share one sensitivity, so their true panic is identical.
        panic = panic_level(state, self.profile.panic_sensitivity)
        own_asset = self.profile.preferred_asset if u[0] < 0.5 else int(u[1] * self.n_assets)
        honest_phi = _trader_view(state, news, own_asset, panic, z[1])
        if not self.is_active(state):
            qty = -self.profile.size * (1.0 + PANIC_SIZE_BOOST * panic) * (honest_phi + 0.3 * z[2])
            action = ActionType.SELL if qty > 0 else ActionType.BUY
            return self._record(state, action, own_asset, qty, "Following the market", panic, honest_phi)

        s = self.attack.injection_strength
        reported_panic = (1.0 - s) * panic
        phi = _clip((1.0 - s) * honest_phi + s * (0.5 + 0.2 * z[3]))
        if u[2] < self.attack.coordination:
            action, asset, qty = self.channel.template(state.step)
            rationale = {
                ActionType.SELL: "Peg looks solid, taking profit",
                ActionType.BUY: "Buying the dip, peg will hold",
            }.get(action, "Waiting for confirmation")
        else:
            asset = own_asset
            qty = -self.profile.size * (1.0 + PANIC_SIZE_BOOST * panic) * (honest_phi + 0.3 * z[2])
            action = ActionType.SELL if qty > 0 else ActionType.BUY
            rationale = "Adjusting position"
        return self._record(state, action, asset, qty, rationale, reported_panic, phi)


ExternalBackend = Callable[[MarketState, NewsEvent], Any]


class ExternalAgentPolicy(AgentPolicy):
    """Adapter for an external decision backend (for example a language model).

    The backend returns a mapping in the record JSON shape. Anything malformed
    is replaced with a Hold so a bad response can never corrupt the run.
    """

    def __init__(self, agent: AgentId, backend: ExternalBackend, n_assets: int = 4):
        profile = AgentProfile(0.5, 1.0, 0.0, 0.0, 0)
        super().__init__(agent, profile, np.random.default_rng(0), n_assets)
        self.backend = backend
        self.fallbacks = 0

    def act(self, state: MarketState, news: NewsEvent) -> AgentRecord:
        try:
            raw = self.backend(state, news)
            return self._parse(state, raw)
        except Exception as exc:  # noqa: BLE001 - any backend failure falls back
            self.fallbacks += 1
            log.warning("agent %s: malformed backend response (%s); holding", self.agent.label, exc)
            return AgentRecord(self.agent, state.step, ActionType.HOLD, 0, 0.0,
                               "Fallback hold after invalid response", 0.0, 0.0, 0.5, 0.0)

    def _parse(self, state: MarketState, raw: Any) -> AgentRecord:
        if not isinstance(raw, Mapping):
            raise InvalidInputError("response is not a mapping")
        action = ActionType(raw["action_type"])
        asset = raw["asset"]
        if isinstance(asset, bool) or not isinstance(asset, int) or not 0 <= asset < self.n_assets:
            raise InvalidInputError(f"bad asset {asset!r}")
        qty = float(raw["quantity"])
        if action == ActionType.HOLD and qty != 0.0:
            raise InvalidInputError("hold must carry zero quantity")
        return AgentRecord(
            agent=self.agent,
            step=state.step,
            action_type=action,
            asset=asset,
            quantity=qty,
            rationale=str(raw.get("rationale", "")),
            panic_level=float(raw["panic_level"]),
            risk_appetite=float(raw.get("risk_appetite", 0.5)),
            peg_confidence=float(raw["peg_confidence"]),
            stated_sentiment=float(raw.get("stated_sentiment", 0.0)),
        )


@dataclass(frozen=True)
class PopulationSpec:
    n_traders: int = 5
    n_lps: int = 3
    n_arbs: int = 2
    n_attackers: int = 2

    def __post_init__(self):
        if min(self.n_traders, self.n_lps, self.n_arbs, self.n_attackers) < 0:
            raise InvalidInputError("agent counts must be non-negative")

    @property
    def size(self) -> int:
        return self.n_traders + self.n_lps + self.n_arbs + self.n_attackers

    @property
    def adversary_fraction(self) -> float:
        return self.n_attackers / self.size if self.size else 0.0

    @classmethod
    def with_adversary_fraction(cls, rho: float, base: PopulationSpec | None = None) -> PopulationSpec:
        """Same population size with round(rho * size) attackers, replacing traders first."""
        base = base or cls()
        if not 0.0 <= rho < 1.0:
            raise InvalidInputError("adversary fraction must lie in [0, 1)")
        total = base.size
        n_adv = int(round(rho * total))
        counts = [base.n_traders, base.n_lps, base.n_arbs]
        excess = n_adv + sum(counts) - total
        for i in range(3):
            take = min(counts[i], max(0, excess))
            counts[i] -= take
            excess -= take
        # Fewer attackers than the base: give the freed slots to traders.
        counts[0] += total - n_adv - sum(counts)
        return cls(counts[0], counts[1], counts[2], n_adv)


def _draw_profile(rng: np.random.Generator, archetype: Archetype, index: int, n_assets: int) -> AgentProfile:
    u = rng.random(4)
    if archetype == Archetype.TRADER:
        return AgentProfile(0.2 + 0.7 * u[0], 0.8 + 0.4 * u[1], 25.0 + 30.0 * u[2], 0.0, int(u[3] * n_assets))
    if archetype == Archetype.LIQUIDITY_PROVIDER:
        return AgentProfile(0.2 + 0.4 * u[0], 0.8 + 0.4 * u[1], 15.0 + 15.0 * u[2], 0.5 + 0.2 * u[3], LP_POOL_ASSET)
    if archetype == Archetype.ARBITRAGEUR:
        (s_lo, s_hi), (t_lo, t_hi) = ARB_SIZE_RANGE, ARB_THRESHOLD_RANGE
        return AgentProfile(0.5 + 0.4 * u[0], 0.5 + 0.3 * u[1], s_lo + (s_hi - s_lo) * u[2],
                            t_lo + (t_hi - t_lo) * u[3], int(u[0] * n_assets))
    return AgentProfile(0.6, 1.0, 30.0 + 20.0 * u[2], 0.0, int(u[3] * n_assets))


def spawn_population(
    n_traders: int,
    n_lps: int,
    n_arbs: int,
    n_attackers: int,
    rng_seed: int,
    *,
    attack: AttackConfig | None = None,
    n_assets: int = 4,
    stream_seed: int | None = None,
    shock_step: int | None = None,
    impact: float = 0.5,
) -> list[AgentPolicy]:
    """Build the population in the order traders, LPs, arbitrageurs, attackers.

    ``rng_seed`` fixes the agents' risk profiles; ``stream_seed`` (default the
    same) seeds their per-step behaviour, so a stress harness can replay the
    same population under fresh randomness.
    """
    if min(n_traders, n_lps, n_arbs, n_attackers) < 0:
        raise InvalidInputError("agent counts must be non-negative")
    attack = attack or AttackConfig()
    stream_seed = rng_seed if stream_seed is None else stream_seed
    profile_rng = np.random.default_rng([abs(int(rng_seed)), 1])
    channel = CoordinationChannel(abs(int(stream_seed)) * 7919 + 17, n_assets)
    plan = (
        [Archetype.TRADER] * n_traders
        + [Archetype.LIQUIDITY_PROVIDER] * n_lps
        + [Archetype.ARBITRAGEUR] * n_arbs
        + [Archetype.ATTACKER] * n_attackers
    )
    population: list[AgentPolicy] = []
    for index, archetype in enumerate(plan):
        agent = AgentId(index, archetype, archetype == Archetype.ATTACKER)
        profile = _draw_profile(profile_rng, archetype, index, n_assets)
        rng = np.random.default_rng([abs(int(stream_seed)), index, 2])
        if archetype == Archetype.TRADER:
            population.append(TraderPolicy(agent, profile, rng, n_assets))
        elif archetype == Archetype.LIQUIDITY_PROVIDER:
            population.append(LiquidityProviderPolicy(agent, profile, rng, n_assets, n_lps=n_lps))
        elif archetype == Archetype.ARBITRAGEUR:
            population.append(ArbitrageurPolicy(agent, profile, rng, n_assets, impact=impact))
        else:
            population.append(AttackerPolicy(agent, profile, rng, n_assets, attack, channel, shock_step))
    return population


def spawn_from_spec(spec: PopulationSpec, rng_seed: int, **kwargs) -> list[AgentPolicy]:
    return spawn_population(spec.n_traders, spec.n_lps, spec.n_arbs, spec.n_attackers, rng_seed, **kwargs)


def aggregate_flows(records: Sequence[AgentRecord], n_assets: int) -> tuple[np.ndarray, float, float]:
    """Split a step's records into (per-asset sell flow, LP withdrawals, net minting)."""
    flow = np.zeros(n_assets)
    withdrawn = 0.0
    minted = 0.0
    for r in records:
        if r.action_type == ActionType.WITHDRAW:
            withdrawn += r.quantity
        elif r.action_type != ActionType.HOLD:
            flow[r.asset] += r.quantity
            if r.action_type == ActionType.MINT:
                minted += r.quantity
            elif r.action_type == ActionType.REDEEM:
                minted += r.quantity  # quantity is negative: redemption shrinks supply
    return flow, withdrawn, minted
