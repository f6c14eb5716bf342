"""Experiment configuration, scenario runs, parameter sweeps and CSV output.

An :class:`ExperimentConfig` is the YAML-serializable description of a study:
city and cost parameters, the population derivation inputs, the periods of
the day, solver/optimizer settings and any sweeps. :func:`market_config`
turns it into the :class:`~avcrowd.model.MarketConfig` the solvers consume.

CSV files are written with a fixed column order, ``\\n`` line endings, UTF-8
and ``repr`` float formatting, so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import io
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .equilibrium import EquilibriumState, NonConvergenceError, SolverSettings, solve_equilibrium
from .model import (
    CHOICES, CLASS_LABELS, CityParams, EconomicParams, LogitSpec, MarketConfig, PeriodSpec,
    PricingDecision,
)
from .scenarios import (
    SCENARIOS, InfeasibleFloorError, LambdaSettings, OptimizationAborted, OptimizerSettings,
    ScenarioResult, ScenarioSpec, maximize, second_best_lambda_loop,
)
from .sensitivity import (
    finite_difference_gradient, objective_gradient, resolved_states, sensitivity_at,
)

log = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "AVCROWD_OUTPUT_DIR"

SWEEP_PARAMETERS = {
    "mu": ("logit", "mu"),
    "population_density": ("population", "population_density"),
    "av_penetration": ("population", "av_ownership_share"),
    "alpha": ("city", "av_occupation_alpha"),
    "N_s": ("economics", "prepurchased_Ns"),
    "m": ("economics", "sharing_cost_m"),
}


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


# ---------------------------------------------------------------------------
# configuration types


@dataclass(frozen=True)
class PopulationSpec:
    """Inputs for splitting residents into the six citizen classes.

    Vehicle owners include AV owners; ``av_owners_with_mv_share`` is the part
    of AV owners who also own a manual car (class b rather than a).
    """

    population_density: float = 5000.0  # persons / km^2
    vehicle_ownership_share: float = 0.30
    av_ownership_share: float = 0.03
    av_owners_with_mv_share: float = 0.5

    def __post_init__(self):
        if self.population_density < 0:
            raise ValueError("population_density must be nonnegative")
        for name in ("vehicle_ownership_share", "av_ownership_share", "av_owners_with_mv_share"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.av_ownership_share > self.vehicle_ownership_share:
            raise ValueError("AV owners are vehicle owners: av_ownership_share <= vehicle_ownership_share")


@dataclass(frozen=True)
class PeriodPlan:
    """A period of the day before class populations are derived.

    ``trip_rate`` is the share of residents with a trip need in one decision
    window. Entries of ``populations`` replace the derived value for that class.
    """

    name: str
    duration_h: float
    trip_rate: float
    decision_window_h: float = 1.0
    populations: Mapping[str, float] | None = None

    def __post_init__(self):
        if self.duration_h <= 0 or self.decision_window_h <= 0:
            raise ValueError("period durations must be positive")
        if not 0.0 <= self.trip_rate <= 1.0:
            raise ValueError("trip_rate must lie in [0, 1]")
        if self.populations is not None:
            unknown = set(self.populations) - set(CLASS_LABELS)
            if unknown:
                raise ValueError(f"unknown citizen classes {sorted(unknown)}")
            if any(v < 0 for v in self.populations.values()):
                raise ValueError("class populations must be nonnegative")
            object.__setattr__(self, "populations",
                               {c: float(v) for c, v in self.populations.items()})


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    grid: tuple[float, ...]
    scenarios: tuple[str, ...] = ("monopoly", "first_best")
    # dotted config paths applied before the swept value, e.g. {"logit.mu": 0.5}
    overrides: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.parameter not in SWEEP_PARAMETERS:
            raise ValueError(f"unknown sweep parameter {self.parameter!r}; "
                             f"expected one of {sorted(SWEEP_PARAMETERS)}")
        grid = tuple(float(v) for v in self.grid)
        if not grid:
            raise ValueError("sweep grid is empty")
        if list(grid) != sorted(grid):
            raise ValueError("sweep grid must be sorted ascending")
        object.__setattr__(self, "grid", grid)
        scen = tuple(_scenario_name(s) for s in self.scenarios)
        if not scen:
            raise ValueError("a sweep needs at least one scenario")
        object.__setattr__(self, "scenarios", scen)
        object.__setattr__(self, "overrides", dict(self.overrides))


def _scenario_name(name: str) -> str:
    canon = name.replace("-", "_")
    if canon not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; expected one of {SCENARIOS}")
    return canon


def _default_periods():
    return (PeriodPlan("peak", 4.0, 0.15), PeriodPlan("off_peak", 20.0, 0.05))


@dataclass(frozen=True)
class ExperimentConfig:
    city: CityParams = field(default_factory=CityParams)
    economics: EconomicParams = field(default_factory=EconomicParams)
    logit: LogitSpec = field(default_factory=LogitSpec)
    population: PopulationSpec = field(default_factory=PopulationSpec)
    periods: tuple[PeriodPlan, ...] = field(default_factory=_default_periods)
    solver: SolverSettings = field(default_factory=lambda: SolverSettings(tolerance=1e-10))
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    lambda_loop: LambdaSettings = field(default_factory=LambdaSettings)
    scenarios: tuple[str, ...] = SCENARIOS
    sweeps: tuple[SweepSpec, ...] = ()
    output_dir: str = "results"

    def __post_init__(self):
        object.__setattr__(self, "periods", tuple(self.periods))
        object.__setattr__(self, "sweeps", tuple(self.sweeps))
        object.__setattr__(self, "scenarios", tuple(_scenario_name(s) for s in self.scenarios))
        if not self.periods:
            raise ValueError("at least one period is required")
        names = [p.name for p in self.periods]
        if len(set(names)) != len(names):
            raise ValueError("period names must be unique")
        if abs(sum(p.duration_h for p in self.periods) - 24.0) > 1e-9:
            raise ValueError("period durations must add up to 24 h")
        # derived populations must be consistent; fail now rather than mid-run
        derive_populations(self)

    def sweep(self, parameter: str) -> SweepSpec | None:
        for s in self.sweeps:
            if s.parameter == parameter:
                return s
        return None


def derive_populations(config: ExperimentConfig) -> list[dict[str, float]]:
    """Class populations per period.

    Trip need is spread over ownership groups in proportion to group size:
    each group contributes ``trip_rate`` of its members as travelers, and AV
    owners without a trip form the non-traveling classes a' and b'.
    """
    pop = config.population
    total = config.city.area_R * pop.population_density
    av = total * pop.av_ownership_share
    mv_only = total * (pop.vehicle_ownership_share - pop.av_ownership_share)
    non_owners = total * (1.0 - pop.vehicle_ownership_share)
    av_only = av * (1.0 - pop.av_owners_with_mv_share)
    av_mv = av * pop.av_owners_with_mv_share
    out = []
    for plan in config.periods:
        rate = plan.trip_rate
        d = {"n": non_owners * rate, "r": mv_only * rate,
             "a": av_only * rate, "a'": av_only * (1.0 - rate),
             "b": av_mv * rate, "b'": av_mv * (1.0 - rate)}
        if plan.populations:
            d.update(plan.populations)
        out.append(d)
    return out


def market_config(config: ExperimentConfig) -> MarketConfig:
    periods = tuple(
        PeriodSpec(plan.name, plan.duration_h, pops, plan.decision_window_h)
        for plan, pops in zip(config.periods, derive_populations(config))
    )
    return MarketConfig(config.city, config.economics, periods, config.logit)


def derive_default_config() -> ExperimentConfig:
    """The reference city: 400 km^2 at 5000 persons/km^2, a 4 h peak and a 20 h off-peak.

    30% of residents own a vehicle and 3% own an AV; 15% of residents travel
    in a peak hour and 5% in an off-peak hour. The profit-floor rate is set so
    the floor lies between the first-best and monopoly profits.
    """
    return ExperimentConfig(economics=EconomicParams(profit_floor_rate_rho=15.0))


# ---------------------------------------------------------------------------
# serialization


def config_to_dict(config: ExperimentConfig) -> dict:
    d = {
        "city": asdict(config.city),
        "economics": asdict(config.economics),
        "logit": {k: (dict(v) if isinstance(v, Mapping) else v) for k, v in asdict(config.logit).items()},
        "population": asdict(config.population),
        "periods": [],
        "solver": asdict(config.solver),
        "optimizer": asdict(config.optimizer),
        "lambda_loop": asdict(config.lambda_loop),
        "scenarios": list(config.scenarios),
        "sweeps": [],
        "output_dir": config.output_dir,
    }
    d["optimizer"]["starts"] = [list(s) for s in config.optimizer.starts]
    for plan in config.periods:
        p = asdict(plan)
        if p["populations"] is None:
            del p["populations"]
        d["periods"].append(p)
    for s in config.sweeps:
        d["sweeps"].append({"parameter": s.parameter, "grid": list(s.grid),
                            "scenarios": list(s.scenarios), "overrides": dict(s.overrides)})
    return d


def _build(cls, data, where: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        f = known[key]
        default = f.default if f.default is not MISSING else None
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: Mapping) -> ExperimentConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("configuration must be a mapping")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    kw: dict[str, Any] = {}
    simple = {"city": CityParams, "economics": EconomicParams, "population": PopulationSpec,
              "solver": SolverSettings, "lambda_loop": LambdaSettings}
    for key, cls in simple.items():
        if key in data:
            kw[key] = _build(cls, data[key], key)
    if "logit" in data:
        logit = dict(data["logit"]) if isinstance(data["logit"], Mapping) else data["logit"]
        if isinstance(logit, dict):
            for k in ("mu", "mu_rental", "mu_travel"):
                if isinstance(logit.get(k), int):
                    logit[k] = float(logit[k])
        kw["logit"] = _build(LogitSpec, logit, "logit")
    if "optimizer" in data:
        opt = data["optimizer"]
        if isinstance(opt, Mapping) and "starts" in opt:
            opt = dict(opt)
            opt["starts"] = tuple(tuple(float(v) for v in s) for s in opt["starts"])
        kw["optimizer"] = _build(OptimizerSettings, opt, "optimizer")
    if "periods" in data:
        if not isinstance(data["periods"], Sequence):
            raise ConfigError("periods: expected a list")
        kw["periods"] = tuple(_build(PeriodPlan, p, f"periods[{i}]")
                              for i, p in enumerate(data["periods"]))
    if "sweeps" in data:
        if not isinstance(data["sweeps"], Sequence):
            raise ConfigError("sweeps: expected a list")
        kw["sweeps"] = tuple(_build(SweepSpec, s, f"sweeps[{i}]")
                             for i, s in enumerate(data["sweeps"]))
    if "scenarios" in data:
        kw["scenarios"] = tuple(data["scenarios"])
    if "output_dir" in data:
        kw["output_dir"] = str(data["output_dir"])
    try:
        return ExperimentConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=False, default_flow_style=False)


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    return config_from_dict(data or {})


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text)


def apply_overrides(config: ExperimentConfig, overrides: Mapping[str, Any]) -> ExperimentConfig:
    """Set dotted paths such as ``economics.sharing_cost_m`` and re-validate."""
    if not overrides:
        return config
    d = config_to_dict(config)
    for path, value in overrides.items():
        node = d
        parts = path.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"override path {path!r} does not exist")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"override path {path!r} does not exist")
        node[parts[-1]] = value
    return config_from_dict(d)


def with_parameter(config: ExperimentConfig, parameter: str, value: float) -> ExperimentConfig:
    section, key = SWEEP_PARAMETERS[parameter]
    if parameter == "mu":
        # the same scale for every class, in both flat and nested form
        return apply_overrides(config, {"logit.mu": value, "logit.mu_rental": value,
                                        "logit.mu_travel": value})
    return apply_overrides(config, {f"{section}.{key}": value})


def resolve_output_dir(config: ExperimentConfig, override=None) -> Path:
    """Explicit argument, then the environment variable, then the config value."""
    return Path(override or os.environ.get(OUTPUT_DIR_ENV) or config.output_dir)


# ---------------------------------------------------------------------------
# CSV output


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(columns: Sequence[str], rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


EQUILIBRIUM_COLUMNS = (
    "scenario", "period", "duration_h", "fare", "payment", "rides_per_vehicle_n0", "rented_Nr",
    "fleet_N", "trips_on_demand", "trips_private_av", "trips_manual", "trips_transit",
    "demand_qo", "demand_qa", "demand_qm", "demand_qp", "trip_time_tr", "pickup_time_tp",
    "customer_wait_wc", "vehicle_idle_wt", "iterations", "residual",
)
CHOICE_COLUMNS = ("scenario", "period", "class", "travel", "rental", "utility", "probability")
TRACE_COLUMNS_HEAD = ("scenario", "lambda", "start", "iteration", "objective", "scaled_gradient",
                      "step", "gradient")


def equilibrium_row(state: EquilibriumState, period: PeriodSpec, scenario: str = "") -> dict:
    """One table row; ``trips_*`` are period totals (trips/h times duration)."""
    H = period.duration_Hk
    return {
        "scenario": scenario, "period": period.name, "duration_h": H,
        "fare": state.fare, "payment": state.payment,
        "rides_per_vehicle_n0": state.rides_per_vehicle_n0, "rented_Nr": state.rented_Nr,
        "fleet_N": state.fleet_N,
        "trips_on_demand": state.demand_qo * H,
        "trips_private_av": (state.demand_qa - state.demand_qo) * H,
        "trips_manual": state.demand_qm * H, "trips_transit": state.demand_qp * H,
        "demand_qo": state.demand_qo, "demand_qa": state.demand_qa,
        "demand_qm": state.demand_qm, "demand_qp": state.demand_qp,
        "trip_time_tr": state.trip_time_tr, "pickup_time_tp": state.pickup_time_tp,
        "customer_wait_wc": state.customer_wait_wc, "vehicle_idle_wt": state.vehicle_idle_wt,
        "iterations": state.iterations, "residual": state.residual,
    }


def choice_rows(state: EquilibriumState, period: PeriodSpec, scenario: str = "") -> list[dict]:
    rows = []
    for i, (label, travel, rental) in enumerate(CHOICES):
        rows.append({"scenario": scenario, "period": period.name, "class": label,
                     "travel": travel, "rental": rental,
                     "utility": state.utilities[i], "probability": state.probabilities[i]})
    return rows


def _price_columns(market: MarketConfig) -> list[str]:
    cols = []
    for p in market.periods:
        cols += [f"fare_{p.name}", f"payment_{p.name}"]
    return cols


def _price_values(prices: PricingDecision, market: MarketConfig) -> dict:
    out = {}
    for p, f, q in zip(market.periods, prices.fares, prices.payments):
        out[f"fare_{p.name}"] = f
        out[f"payment_{p.name}"] = q
    return out


def summary_columns(market: MarketConfig) -> list[str]:
    return ["scenario", "daily_profit", "daily_welfare", "objective", "converged", "iterations",
            "projected_gradient", "profit_floor", "constraint_slack", "lambda",
            "start_fare", "start_payment", *_price_columns(market)]


def summary_row(result: ScenarioResult, market: MarketConfig) -> dict:
    row = {"scenario": result.scenario, "daily_profit": result.daily_profit,
           "daily_welfare": result.daily_welfare, "objective": result.objective,
           "converged": result.converged, "iterations": result.iterations,
           "projected_gradient": result.projected_gradient,
           "profit_floor": result.profit_floor, "constraint_slack": result.constraint_slack,
           "lambda": result.lam,
           "start_fare": result.start[0] if result.start else None,
           "start_payment": result.start[1] if result.start else None}
    row.update(_price_values(result.prices, market))
    return row


def trace_columns(market: MarketConfig) -> list[str]:
    n = market.n_periods
    prices = []
    for k in range(n):
        prices += [f"fare_{k}", f"payment_{k}"]
    return [*TRACE_COLUMNS_HEAD, *prices, "note"]


def write_result(result: ScenarioResult, market: MarketConfig, out_dir: Path) -> list[Path]:
    """Equilibrium, choice, summary and trace tables for one scenario."""
    out_dir = Path(out_dir)
    name = result.scenario
    eq_rows = [equilibrium_row(s, p, name) for s, p in zip(result.states, market.periods)]
    ch_rows = [r for s, p in zip(result.states, market.periods) for r in choice_rows(s, p, name)]
    trace = [{"scenario": name, "lambda": result.lam, **row} for row in result.trace]
    files = {
        out_dir / f"{name}_equilibrium.csv": csv_text(EQUILIBRIUM_COLUMNS, eq_rows),
        out_dir / f"{name}_choices.csv": csv_text(CHOICE_COLUMNS, ch_rows),
        out_dir / f"{name}_summary.csv": csv_text(summary_columns(market), [summary_row(result, market)]),
        out_dir / f"{name}_trace.csv": csv_text(trace_columns(market), trace),
    }
    if result.lambda_history:
        files[out_dir / f"{name}_lambda.csv"] = csv_text(
            ("lam", "profit", "welfare", "violation"), result.lambda_history)
    for path, text in files.items():
        write_atomic(path, text)
    return list(files)


# ---------------------------------------------------------------------------
# runs


def scenario_spec(config: ExperimentConfig, kind: str, rho: float | None = None) -> ScenarioSpec:
    return ScenarioSpec(_scenario_name(kind), rho=rho, optimizer=config.optimizer,
                        lambda_loop=config.lambda_loop, solver=config.solver)


def run_scenarios(config: ExperimentConfig, kinds: Sequence[str], rho: float | None = None
                  ) -> dict[str, ScenarioResult | Exception]:
    """Optimize several scenarios, sharing the monopoly and first-best runs with second-best.

    Failures are returned in place of results so callers can record them.
    """
    kinds = [_scenario_name(k) for k in kinds]
    market = market_config(config)
    opt, solver = config.optimizer, config.solver
    done: dict[str, ScenarioResult | Exception] = {}

    def get(kind):
        if kind not in done:
            try:
                if kind == "monopoly":
                    done[kind] = maximize("profit", market, opt, solver, label="monopoly")
                elif kind == "first_best":
                    done[kind] = maximize("welfare", market, opt, solver, label="first_best")
                else:
                    mono, fb = get("monopoly"), get("first_best")
                    for dep in (mono, fb):
                        if isinstance(dep, Exception):
                            raise dep
                    r = config.economics.profit_floor_rate_rho if rho is None else rho
                    done[kind] = second_best_lambda_loop(
                        market, r, scenario_spec(config, kind, r), monopoly=mono, first_best=fb)
            except (NonConvergenceError, OptimizationAborted, InfeasibleFloorError) as exc:
                done[kind] = exc
        return done[kind]

    for k in kinds:
        get(k)
    return {k: done[k] for k in kinds}


def run(config: ExperimentConfig, scenario: str, out_dir=None, rho: float | None = None
        ) -> ScenarioResult:
    """Optimize one scenario and write its CSV tables; solver errors propagate."""
    kind = _scenario_name(scenario)
    result = run_scenarios(config, [kind], rho)[kind]
    if isinstance(result, Exception):
        raise result
    write_result(result, market_config(config), resolve_output_dir(config, out_dir))
    return result


def solve_prices(config: ExperimentConfig, fares: Sequence[float], payments: Sequence[float]
                 ) -> list[EquilibriumState]:
    """Per-period equilibria at given prices (one value broadcasts to every period)."""
    market = market_config(config)
    n = market.n_periods
    fares = list(fares) * n if len(fares) == 1 else list(fares)
    payments = list(payments) * n if len(payments) == 1 else list(payments)
    if len(fares) != n or len(payments) != n:
        raise ConfigError(f"expected 1 or {n} fares and payments")
    return [solve_equilibrium(f, p, market, period, config.solver)
            for f, p, period in zip(fares, payments, market.periods)]


# ---------------------------------------------------------------------------
# sweeps


def sweep_columns(market: MarketConfig) -> list[str]:
    cols = ["parameter", "value", "scenario", "status", "message", "daily_profit",
            "daily_welfare", "lambda", "converged"]
    for p in market.periods:
        cols += [f"fare_{p.name}", f"payment_{p.name}", f"trips_on_demand_{p.name}",
                 f"trips_private_av_{p.name}", f"trips_manual_{p.name}",
                 f"trips_transit_{p.name}", f"rented_{p.name}"]
    return cols


def _sweep_rows(parameter, value, kinds, outcome, market) -> list[dict]:
    rows = []
    for kind in kinds:
        res = outcome.get(kind) if isinstance(outcome, dict) else outcome
        row = {"parameter": parameter, "value": value, "scenario": kind}
        if isinstance(res, ScenarioResult):
            row.update(status="ok", message="", daily_profit=res.daily_profit,
                       daily_welfare=res.daily_welfare, converged=res.converged, **{"lambda": res.lam})
            row.update(_price_values(res.prices, market))
            for s, p in zip(res.states, market.periods):
                e = equilibrium_row(s, p)
                for key in ("trips_on_demand", "trips_private_av", "trips_manual", "trips_transit"):
                    row[f"{key}_{p.name}"] = e[key]
                row[f"rented_{p.name}"] = s.rented_Nr
        else:
            status = "infeasible" if isinstance(res, InfeasibleFloorError) else "failed"
            row.update(status=status, message=f"{type(res).__name__}: {res}")
        rows.append(row)
    return rows


def _sweep_point(args):
    config_dict, parameter, value, kinds, point_path = args
    config = config_from_dict(config_dict)
    try:
        point = with_parameter(config, parameter, value)
        market = market_config(point)
        outcome = run_scenarios(point, kinds)
    except (ConfigError, ValueError) as exc:
        market = market_config(config)
        outcome = exc
    rows = _sweep_rows(parameter, value, kinds, outcome, market)
    write_atomic(Path(point_path), csv_text(sweep_columns(market), rows))
    return rows


def sweep(config: ExperimentConfig, spec: SweepSpec, out_dir=None, jobs: int = 1) -> list[dict]:
    """Run every scenario at every grid value; one row per (value, scenario).

    Points may run in parallel (``jobs`` worker processes). Each point is
    written atomically to its own file before the combined table is
    assembled in grid order, so the result does not depend on ``jobs``.
    """
    base = apply_overrides(config, spec.overrides)
    market = market_config(base)
    out = resolve_output_dir(config, out_dir)
    point_dir = out / f"sweep_{spec.parameter}_points"
    tasks = [(config_to_dict(base), spec.parameter, v, spec.scenarios,
              str(point_dir / f"point_{i:03d}.csv")) for i, v in enumerate(spec.grid)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            parts = list(pool.map(_sweep_point, tasks))
    else:
        parts = [_sweep_point(t) for t in tasks]
    rows = [r for part in parts for r in part]
    write_atomic(out / f"sweep_{spec.parameter}.csv", csv_text(sweep_columns(market), rows))
    return rows


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradientCheck:
    objective: str
    prices: np.ndarray
    analytic: np.ndarray
    finite_difference: np.ndarray

    @property
    def relative_error(self) -> float:
        scale = max(float(np.max(np.abs(self.finite_difference))), 1e-12)
        return float(np.max(np.abs(self.analytic - self.finite_difference)) / scale)


def check_gradients(config: ExperimentConfig, points: int = 5, seed: int = 0,
                    low: float = 5.0, high: float = 45.0, lam: float = 0.5,
                    rel_step: float = 1e-4) -> list[GradientCheck]:
    """Compare analytic objective gradients with central differences through re-solves."""
    from .scenarios import _objective_value

    market = market_config(config)
    floor = config.economics.profit_floor
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(points):
        x = rng.uniform(low, high, 2 * market.n_periods)
        states = resolved_states(x, market, config.solver)
        bundles = [sensitivity_at(s, market, p, config.solver) for s, p in zip(states, market.periods)]
        starts = [s.fixed_point_vars for s in states]
        for kind in ("profit", "welfare", "lagrangian"):
            g = objective_gradient(kind, states, bundles, market, lam)

            def f(z, kind=kind):
                st = resolved_states(z, market, config.solver, starts)
                return _objective_value(kind, lam, floor, PricingDecision.from_vector(z), st, market)

            fd = finite_difference_gradient(f, x, rel_step)
            out.append(GradientCheck(kind, x.copy(), g, fd))
    return out
