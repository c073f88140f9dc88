"""Trust-weighted, stress-augmented reserve control for a simulated stablecoin market."""

from .config import Config, load_config
from .controller import ControllerConfig, EpochResult, Method, run_epoch, run_trajectory
from .market import MarketParams, MarketState, ShockKind, ShockSpec
from .optimizer import PortfolioProblem, Solution, kkt_check, solve
from .trust import TrustParams, TrustReport, score_population, trust_score

__version__ = "0.1.0"

__all__ = [
    "Config",
    "ControllerConfig",
    "EpochResult",
    "MarketParams",
    "MarketState",
    "Method",
    "PortfolioProblem",
    "ShockKind",
    "ShockSpec",
    "Solution",
    "TrustParams",
    "TrustReport",
    "kkt_check",
    "load_config",
    "run_epoch",
    "run_trajectory",
    "score_population",
    "solve",
    "trust_score",
]
