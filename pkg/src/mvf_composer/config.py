"""Experiment configuration: YAML loading, env overrides, validation, presets."""

from __future__ import annotations

import copy
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .agents import AttackConfig, PopulationSpec, TimingMode
from .controller import ControllerConfig, Method, OptimizerParams
from .errors import ConfigError, InvalidInputError
from .market import MarketParams, ShockKind, ShockSpec
from .trust import TrustParams

logger = logging.getLogger(__name__)

ENV_PREFIX = "MVF__"

# Scalar market constants exposed in the config file; the covariance fixtures stay in code.
MARKET_KEYS = (
    "reversion",
    "impact",
    "peg_noise",
    "shortfall_passthrough",
    "sentiment_memory",
    "liquidity_floor",
    "stress_decay",
    "vol_decay",
    "initial_liquidity",
    "initial_supply",
    "initial_collateral_ratio",
)
CONTROLLER_KEYS = (
    "n_stress_runs",
    "horizon",
    "epoch_length",
    "max_qty",
    "epsilon",
    "harness_sentiment",
    "harness_drawdown",
)


@dataclass(frozen=True)
class ShockOverrides:
    """Optional magnitudes applied on top of each shock kind's defaults."""

    injection_step: int = 30
    price_drawdown: Optional[float] = None
    sentiment_target: Optional[float] = None
    liquidity_withdrawal: Optional[float] = None

    def spec(self, kind: ShockKind | str) -> ShockSpec:
        return ShockSpec.from_kind(
            kind,
            self.injection_step,
            price_drawdown=self.price_drawdown,
            sentiment_target=self.sentiment_target,
            liquidity_withdrawal=self.liquidity_withdrawal,
        )


@dataclass(frozen=True)
class ExperimentSettings:
    methods: tuple[Method, ...] = (
        Method.MVF_COMPOSER,
        Method.MVF_NO_TRUST,
        Method.SAS,
        Method.STATIC_6040,
        Method.UNCONSTRAINED,
    )
    shocks: tuple[ShockKind, ...] = (ShockKind.BLACK_THURSDAY,)
    n_runs: int = 10
    seed: int = 42
    recovery_epsilon: float = 0.01
    adversary_fraction: Optional[float] = None


@dataclass(frozen=True)
class Config:
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    shock: ShockOverrides = field(default_factory=ShockOverrides)
    controller: ControllerConfig = field(default_factory=ControllerConfig)

    def controller_for(self, method: Method | str) -> ControllerConfig:
        return dataclasses.replace(self.controller, method=Method(method))

    def shock_spec(self, kind: ShockKind | str) -> ShockSpec:
        return self.shock.spec(kind)

    def to_dict(self) -> dict:
        return to_dict(self)


# Presets ----------------------------------------------------------------------

PRESETS: dict[str, dict] = {
    "quick": {
        "experiment": {
            "methods": ["MVFComposer", "MVFNoTrust", "SAS", "Static6040"],
            "shocks": ["BlackThursday"],
            "n_runs": 100,
        },
    },
    # 300 seeds under each of the four shock kinds: 1200 scenarios per method.
    "full": {
        "experiment": {
            "methods": ["MVFComposer", "MVFNoTrust", "SAS", "Static6040", "Unconstrained"],
            "shocks": ["Normal", "PriceShock", "SentimentShock", "BlackThursday"],
            "n_runs": 300,
        },
    },
}


# Serialization ------------------------------------------------------------------


def _plain(value: Any) -> Any:
    if isinstance(value, (Method, ShockKind, TimingMode)):
        return value.value
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def to_dict(config: Config) -> dict:
    ctl = config.controller
    return {
        "experiment": {f.name: _plain(getattr(config.experiment, f.name))
                       for f in dataclasses.fields(ExperimentSettings)},
        "shock": dataclasses.asdict(config.shock),
        "controller": {k: _plain(getattr(ctl, k)) for k in CONTROLLER_KEYS},
        "optimizer": {f.name: _plain(getattr(ctl.optimizer, f.name)) for f in dataclasses.fields(OptimizerParams)},
        "trust": {f.name: _plain(getattr(ctl.trust, f.name)) for f in dataclasses.fields(TrustParams)},
        "population": dataclasses.asdict(ctl.population),
        "attack": {f.name: _plain(getattr(ctl.attack, f.name)) for f in dataclasses.fields(AttackConfig)},
        "market": {k: getattr(ctl.market, k) for k in MARKET_KEYS},
    }


def dump_yaml(config: Config) -> str:
    return yaml.safe_dump(to_dict(config), sort_keys=False)


def save_config(config: Config, path: str | Path) -> None:
    Path(path).write_text(dump_yaml(config))


# Parsing ----------------------------------------------------------------------


def _defaults() -> dict:
    return to_dict(Config())


def _merge(base: dict, override: Mapping, errors: list[str], prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in out:
            errors.append(f"{path}: unknown key")
        elif isinstance(out[key], dict):
            if isinstance(value, Mapping):
                out[key] = _merge(out[key], value, errors, path + ".")
            else:
                errors.append(f"{path}: expected a mapping")
        else:
            out[key] = value
    return out


def _coerce(path: str, value: Any, default: Any, errors: list[str]) -> Any:
    """Coerce ``value`` to the type of ``default``; record a field error on failure."""
    if value is None:
        return None
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if isinstance(default, float) or default is None:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, str):
            return str(value)
        if isinstance(default, list):
            if not isinstance(value, (list, tuple)):
                raise TypeError
            return list(value)
    except (TypeError, ValueError):
        errors.append(f"{path}: cannot interpret {value!r} as {type(default).__name__}")
        return default
    return value


def _section(data: dict, name: str, errors: list[str]) -> dict:
    defaults = _defaults()[name]
    return {k: _coerce(f"{name}.{k}", data[name].get(k), defaults[k], errors) for k in defaults}


def _build(name: str, factory, kwargs: dict, errors: list[str]):
    """Construct a section object, turning its validation error into a field message."""
    try:
        return factory(**kwargs)
    except (InvalidInputError, ValueError, TypeError) as exc:
        msg = str(exc)
        key = next((k for k in sorted(kwargs, key=len, reverse=True) if k in msg), None)
        errors.append(f"{name}.{key}: {msg}" if key else f"{name}: {msg}")
        return None


def _enum_list(path: str, values, enum, errors: list[str]) -> tuple:
    out = []
    for v in values or []:
        try:
            out.append(enum(v))
        except ValueError:
            allowed = ", ".join(e.value for e in enum)
            errors.append(f"{path}: unknown value {v!r} (allowed: {allowed})")
    return tuple(out)


def config_from_dict(data: Mapping | None) -> Config:
    """Merge ``data`` over the defaults and validate; raises ``ConfigError`` listing every bad field."""
    errors: list[str] = []
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(["<root>: expected a mapping"])
    merged = _merge(_defaults(), data, errors)

    exp = _section(merged, "experiment", errors)
    methods = _enum_list("experiment.methods", exp["methods"], Method, errors)
    shocks = _enum_list("experiment.shocks", exp["shocks"], ShockKind, errors)
    if not methods:
        errors.append("experiment.methods: at least one method is required")
    if not shocks:
        errors.append("experiment.shocks: at least one shock kind is required")
    if exp["n_runs"] is None or exp["n_runs"] < 1:
        errors.append("experiment.n_runs: must be at least 1")
    if exp["recovery_epsilon"] is None or not exp["recovery_epsilon"] > 0:
        errors.append("experiment.recovery_epsilon: must be positive")
    rho = exp["adversary_fraction"]
    if rho is not None and not 0.0 <= rho < 1.0:
        errors.append("experiment.adversary_fraction: must lie in [0, 1)")
    experiment = ExperimentSettings(methods, shocks, exp["n_runs"] or 1, exp["seed"] or 0,
                                    exp["recovery_epsilon"] or 0.01, rho)

    shock_kwargs = _section(merged, "shock", errors)
    shock = _build("shock", ShockOverrides, shock_kwargs, errors)
    if shock is not None:
        for kind in shocks:
            _build("shock", shock.spec, {"kind": kind}, errors)

    opt_kwargs = _section(merged, "optimizer", errors)
    trust_kwargs = _section(merged, "trust", errors)
    pop_kwargs = _section(merged, "population", errors)
    attack_kwargs = _section(merged, "attack", errors)
    market_kwargs = _section(merged, "market", errors)
    ctl_kwargs = _section(merged, "controller", errors)
    if trust_kwargs["weights"] is not None and len(trust_kwargs["weights"]) != 4:
        errors.append("trust.weights: expected four numbers")
    optimizer = _build("optimizer", OptimizerParams, opt_kwargs, errors)
    trust = _build("trust", TrustParams, trust_kwargs, errors)
    population = _build("population", PopulationSpec, pop_kwargs, errors)
    attack = _build("attack", AttackConfig, attack_kwargs, errors)
    market = _build("market", MarketParams, market_kwargs, errors)
    if population is not None and rho is not None:
        population = _build("experiment", PopulationSpec.with_adversary_fraction,
                            {"rho": rho, "base": population}, errors)
    if errors:
        raise ConfigError(errors)
    controller = _build(
        "controller",
        ControllerConfig,
        dict(optimizer=optimizer, trust=trust, population=population, attack=attack, market=market, **ctl_kwargs),
        errors,
    )
    if errors:
        raise ConfigError(errors)
    return Config(experiment, shock, controller)


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    """Nested overrides from ``MVF__SECTION__KEY=value`` variables (values parsed as YAML scalars)."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in name[len(ENV_PREFIX):].split("__") if p]
        if len(parts) != 2:
            raise ConfigError([f"{name}: expected {ENV_PREFIX}SECTION__KEY"])
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        out.setdefault(parts[0], {})[parts[1]] = value
    return out


def _deep_update(base: dict, extra: Mapping) -> dict:
    for key, value in extra.items():
        if isinstance(value, Mapping) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = copy.deepcopy(value)
    return base


def load_config(
    path: str | Path | None = None,
    *,
    preset: str | None = None,
    overrides: Mapping | None = None,
    environ: Mapping[str, str] | None = None,
) -> Config:
    """Build a config from, in increasing priority: defaults, preset, file, environment, ``overrides``."""
    data: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError([f"preset: unknown preset {preset!r} (allowed: {', '.join(PRESETS)})"])
        _deep_update(data, PRESETS[preset])
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigError([f"config: cannot read {path}: {exc.strerror}"]) from exc
        except yaml.YAMLError as exc:
            raise ConfigError([f"config: invalid YAML in {path}: {exc}"]) from exc
        if loaded is not None and not isinstance(loaded, Mapping):
            raise ConfigError(["<root>: expected a mapping"])
        _deep_update(data, loaded or {})
    _deep_update(data, env_overrides(environ))
    if overrides:
        _deep_update(data, overrides)
    return config_from_dict(data)


def set_parameter(config: Config, name: str, value: Any) -> Config:
    """Copy of ``config`` with the dotted parameter ``section.key`` replaced."""
    parts = name.split(".")
    data = to_dict(config)
    if len(parts) != 2 or parts[0] not in data or parts[1] not in data[parts[0]]:
        raise ConfigError([f"{name}: unknown parameter"])
    data[parts[0]][parts[1]] = value
    return config_from_dict(data)
