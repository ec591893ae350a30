"""
Experiment configuration: one JSON document with nested sections.

{
  "variant": "weighting",
  "voting": {"k": 250, "sigma1": 150, "sigma2": 40, "threshold": 200,
             "delta": 1e-5, "num_classes": 10, "label_cap": 2000},
  "budgets": [{"epsilon": 0.6931, "ratio": 0.5}, {"epsilon": 1.3863, "ratio": 0.5}],
  "num_points": 60000,
  "simulation": {"num_queries": 9000, "teacher_accuracy": 0.9,
                 "hard_query_rate": 0.026, "votes_path": null},
  "accounting": {...},
  "class_skew": null,
  "seed": 0, "ensembles": 10, "voting_processes": 5,
  "output_dir": "results"
}

class_skew, when set, replaces the budget shares: the single budget share
gives the base epsilon and favored_ratio of favored_class moves to
favored_epsilon, e.g.
  "class_skew": {"class_fractions": [], "favored_class": 3,
                 "favored_ratio": 0.5, "favored_epsilon": 1.3863}
An empty class_fractions means equally frequent classes.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Tuple

from aggregators import Variant, VotingConfig
from atomic_files import atomic_write
from errors import ConfigError, InvalidParameterError, PateError
from planner import (DEFAULT_DUPLICATE_CAP, DEFAULT_PRECISION, DEFAULT_RESHUFFLE_PERIOD,
                     DEFAULT_VANISHING_EXPONENT, SIGMA_SCALINGS, class_skew_shares)
from rdp_accountant import orders_grid

DEFAULT_LABEL_CAP = 2000
LOW_BUDGET = math.log(2)
HIGH_BUDGETS = (math.log(4), math.log(8), math.log(16))

MNIST_PRESET = VotingConfig(k=250, sigma1=150.0, sigma2=40.0, threshold=200.0, delta=1e-5,
                            num_classes=10, label_cap=DEFAULT_LABEL_CAP)
ADULT_PRESET = VotingConfig(k=250, sigma1=200.0, sigma2=40.0, threshold=300.0, delta=1e-5,
                            num_classes=2, label_cap=DEFAULT_LABEL_CAP)
PRESETS = {"mnist": MNIST_PRESET, "adult": ADULT_PRESET}
GATE_ACCOUNTING = ("loose", "free")


@dataclass(frozen=True)
class BudgetShare:
    epsilon: float
    ratio: float


@dataclass(frozen=True)
class ClassSkewConfig:
    """Part of one class carries a higher budget; the rest keeps the single base budget."""
    class_fractions: Tuple[float, ...] = ()
    favored_class: int = 0
    favored_ratio: float = 0.5
    favored_epsilon: float = HIGH_BUDGETS[0]

    def __post_init__(self):
        object.__setattr__(self, "class_fractions", tuple(float(f) for f in self.class_fractions))


@dataclass(frozen=True)
class SimulationConfig:
    num_queries: int = 9000
    teacher_accuracy: float = 0.9
    hard_query_rate: float = 0.0
    votes_path: Optional[str] = None


@dataclass(frozen=True)
class AccountingOptions:
    gate_accounting: str = "loose"
    min_order: int = 2
    max_order: int = 50
    vanishing_exponent: float = DEFAULT_VANISHING_EXPONENT
    vanishing_sigma_scaling: str = "sqrt_active_fraction"
    reshuffle_period: int = DEFAULT_RESHUFFLE_PERIOD
    duplicate_cap: int = DEFAULT_DUPLICATE_CAP
    upsampling_precision: float = DEFAULT_PRECISION
    stop_at_exhaustion: bool = False

    def orders(self):
        return orders_grid(self.min_order, self.max_order)


@dataclass(frozen=True)
class ExperimentConfig:
    variant: Variant = Variant.CONFIDENT
    voting: VotingConfig = MNIST_PRESET
    budgets: Tuple[BudgetShare, ...] = (BudgetShare(LOW_BUDGET, 1.0),)
    num_points: int = 60000
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    accounting: AccountingOptions = field(default_factory=AccountingOptions)
    class_skew: Optional[ClassSkewConfig] = None
    seed: int = 0
    ensembles: int = 1
    voting_processes: int = 1
    output_dir: str = "results"

    def __post_init__(self):
        validate(self)

    @property
    def repetitions(self) -> int:
        return self.ensembles * self.voting_processes

    def shares(self):
        """(epsilon, ratio) pairs the planner splits the data by."""
        if self.class_skew is None:
            return [(b.epsilon, b.ratio) for b in self.budgets]
        skew = self.class_skew
        fractions = skew.class_fractions or (1.0,) * self.voting.num_classes
        return class_skew_shares(fractions, skew.favored_class, skew.favored_ratio,
                                 self.budgets[0].epsilon, skew.favored_epsilon)


def validate(config: ExperimentConfig) -> None:
    if not config.budgets:
        raise ConfigError("at least one budget share is required")
    if any(b.epsilon <= 0 for b in config.budgets):
        raise ConfigError("budget epsilons must be positive")
    if any(b.ratio < 0 for b in config.budgets) or not math.isclose(sum(b.ratio for b in config.budgets), 1.0, abs_tol=1e-9):
        raise ConfigError("budget ratios must be nonnegative and sum to 1")
    if config.num_points < len(config.budgets):
        raise ConfigError("num_points must cover every budget group")
    if config.ensembles < 1 or config.voting_processes < 1:
        raise ConfigError("ensembles and voting_processes must be at least 1")
    if config.accounting.gate_accounting not in GATE_ACCOUNTING:
        raise ConfigError(f"gate_accounting must be one of {GATE_ACCOUNTING}")
    if config.accounting.vanishing_sigma_scaling not in SIGMA_SCALINGS:
        raise ConfigError(f"vanishing_sigma_scaling must be one of {SIGMA_SCALINGS}")
    if config.simulation.num_queries < 1:
        raise ConfigError("num_queries must be positive")
    if config.class_skew is not None:
        _validate_class_skew(config)


def _validate_class_skew(config: ExperimentConfig) -> None:
    skew = config.class_skew
    if len(config.budgets) != 1:
        raise ConfigError("class skew takes its base budget from exactly one budget share")
    if skew.favored_epsilon <= config.budgets[0].epsilon:
        raise ConfigError("favored_epsilon must exceed the base budget")
    if skew.class_fractions:
        if len(skew.class_fractions) != config.voting.num_classes:
            raise ConfigError(f"class_fractions needs {config.voting.num_classes} entries, "
                              f"got {len(skew.class_fractions)}")
        if any(f < 0 for f in skew.class_fractions) or sum(skew.class_fractions) <= 0:
            raise ConfigError("class_fractions must be nonnegative with a positive sum")
    try:
        config.shares()
    except InvalidParameterError as e:
        raise ConfigError(f"class skew: {e}") from e


def config_to_dict(config: ExperimentConfig) -> dict:
    data = asdict(config)
    data["variant"] = config.variant.value
    return data


def _section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(data) - {f.name for f in fields(ExperimentConfig)}
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    try:
        kwargs = dict(data)
        if "variant" in kwargs:
            kwargs["variant"] = Variant(kwargs["variant"])
        if "voting" in kwargs:
            kwargs["voting"] = _section(VotingConfig, kwargs["voting"], "voting")
        if "budgets" in kwargs:
            kwargs["budgets"] = tuple(_section(BudgetShare, b, "budgets") for b in kwargs["budgets"])
        if "simulation" in kwargs:
            kwargs["simulation"] = _section(SimulationConfig, kwargs["simulation"], "simulation")
        if "accounting" in kwargs:
            kwargs["accounting"] = _section(AccountingOptions, kwargs["accounting"], "accounting")
        if kwargs.get("class_skew") is not None:
            kwargs["class_skew"] = _section(ClassSkewConfig, kwargs["class_skew"], "class_skew")
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (PateError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def load_config(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    return config_from_dict(data)


def save_config(config: ExperimentConfig, path: str) -> str:
    return atomic_write(path, lambda f: f.write(json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n"))


def with_overrides(config: ExperimentConfig, **overrides) -> ExperimentConfig:
    """
    Apply flat overrides; voting/simulation/accounting/class_skew keys land
    in their section. A class-skew key switches the section on.
    """
    sections = {"voting": VotingConfig, "simulation": SimulationConfig, "accounting": AccountingOptions,
                "class_skew": ClassSkewConfig}
    top, nested = {}, {name: {} for name in sections}
    for key, value in overrides.items():
        if value is None:
            continue
        for name, cls in sections.items():
            if key in {f.name for f in fields(cls)}:
                nested[name][key] = value
                break
        else:
            top[key] = value
    try:
        for name, changes in nested.items():
            if changes:
                current = getattr(config, name)
                top[name] = replace(current if current is not None else sections[name](), **changes)
        if "variant" in top:
            top["variant"] = Variant(top["variant"])
        return replace(config, **top)
    except (PateError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid override: {e}") from e
