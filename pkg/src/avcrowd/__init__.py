"""Equilibrium and pricing of an autonomous-vehicle crowdsourcing mobility market."""

from .equilibrium import (
    EquilibriumState, NonConvergenceError, SolverSettings, phi_map, solve_equilibrium,
)
from .harness import (
    ConfigError, ExperimentConfig, SweepSpec, derive_default_config, load_config,
    market_config, run, sweep,
)
from .model import (
    CityParams, EconomicParams, LogitSpec, MarketConfig, PeriodSpec, PricingDecision,
)
from .scenarios import (
    InfeasibleFloorError, ScenarioResult, ScenarioSpec, optimize, second_best_lambda_loop,
)

__version__ = "0.1.0"

__all__ = [
    "CityParams", "ConfigError", "EconomicParams", "EquilibriumState", "ExperimentConfig",
    "InfeasibleFloorError", "LogitSpec", "MarketConfig", "NonConvergenceError", "PeriodSpec",
    "PricingDecision", "ScenarioResult", "ScenarioSpec", "SolverSettings", "SweepSpec",
    "derive_default_config", "load_config", "market_config", "optimize", "phi_map", "run",
    "second_best_lambda_loop", "solve_equilibrium", "sweep",
]
