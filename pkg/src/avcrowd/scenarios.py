"""Platform objectives and price optimization.

Three scenarios choose per-period fares and payments:

* ``monopoly`` maximizes daily platform profit;
* ``first_best`` maximizes daily social welfare;
* ``second_best`` maximizes welfare subject to profit at least
  ``rho * (N_s (g + z) + C_f)``, handled by a Lagrangian term whose
  multiplier is found by bisection.

Optimization is projected gradient ascent on the nonnegative orthant with
Barzilai-Borwein trial steps and Armijo backtracking. Each trial point is a
full re-solve of the per-period equilibria; gradients come from the implicit
function theorem (see :mod:`avcrowd.sensitivity`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .equilibrium import EquilibriumState, NonConvergenceError, SolverSettings
from .model import MarketConfig, PricingDecision
from .sensitivity import (
    IrregularEquilibriumError, finite_difference_gradient, objective_gradient,
    period_welfare, resolved_states, sensitivity_at,
)

log = logging.getLogger(__name__)

SCENARIOS = ("monopoly", "first_best", "second_best")


class InfeasibleFloorError(ValueError):
    """The profit floor exceeds the best attainable (monopoly) profit."""

    def __init__(self, message, monopoly_profit):
        super().__init__(message)
        self.monopoly_profit = monopoly_profit


class OptimizationAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerSettings:
    max_iterations: int = 300
    gradient_tolerance: float = 1e-4
    armijo: float = 1e-4
    backtrack: float = 0.5
    initial_step: float = 1.0
    max_backtracks: int = 40
    # start prices (fare, payment) applied to every period
    starts: tuple[tuple[float, float], ...] = ((10.0, 10.0), (30.0, 30.0), (20.0, 40.0), (40.0, 20.0))
    max_solver_failures: int = 5

    def __post_init__(self):
        if not self.gradient_tolerance > 0:
            raise ValueError("gradient_tolerance must be positive")
        if not 0 < self.backtrack < 1 or not 0 < self.armijo < 1:
            raise ValueError("line-search constants must lie in (0, 1)")
        if not self.starts:
            raise ValueError("at least one start is required")


@dataclass(frozen=True)
class LambdaSettings:
    lam_max: float = 1e3
    rel_tolerance: float = 1e-3
    max_bisections: int = 60


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    rho: float | None = None
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    lambda_loop: LambdaSettings = field(default_factory=LambdaSettings)
    solver: SolverSettings = field(default_factory=lambda: SolverSettings(tolerance=1e-10))

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.kind!r}; expected one of {SCENARIOS}")
        if self.rho is not None and self.rho < 0:
            raise ValueError("rho must be nonnegative")


@dataclass
class ScenarioResult:
    scenario: str
    prices: PricingDecision
    states: list[EquilibriumState]
    daily_profit: float
    daily_welfare: float
    objective: float
    projected_gradient: float
    converged: bool
    iterations: int
    profit_floor: float | None = None
    constraint_slack: float | None = None
    lam: float | None = None
    start: tuple[float, float] | None = None
    trace: list[dict] = field(default_factory=list)
    lambda_history: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# objectives


def daily_profit(prices: PricingDecision, states, config: MarketConfig) -> float:
    """Daily platform profit: scaled per-period money flow less fleet and fixed costs."""
    total = 0.0
    for fare, pay, state, period in zip(prices.fares, prices.payments, states, config.periods):
        h = period.decision_window_h
        flow = fare * state.demand_qo * h - state.rented_Nr * pay * state.rides_per_vehicle_n0
        total += period.duration_Hk / h * flow
    return total - config.econ.fleet_daily_cost - config.econ.fixed_cost_Cf


def daily_welfare(prices: PricingDecision, states, config: MarketConfig) -> float:
    """Daily social welfare: logsum consumer surplus with transfers netted out.

    Each period contributes ``(H_k / h) * S_k`` where ``S_k`` adds the
    platform's money flow once to the population-weighted logsums.
    """
    total = 0.0
    for fare, pay, state, period in zip(prices.fares, prices.payments, states, config.periods):
        if (fare, pay) != (state.fare, state.payment):
            raise ValueError("states were solved at different prices")
        total += period.duration_Hk / period.decision_window_h * period_welfare(state, config, period)
    return total


def _objective_value(kind, lam, floor, prices, states, config):
    if kind == "profit":
        return daily_profit(prices, states, config)
    welfare = daily_welfare(prices, states, config)
    if kind == "welfare":
        return welfare
    return welfare + lam * (daily_profit(prices, states, config) - floor)


def project(x) -> np.ndarray:
    """Projection onto nonnegative prices."""
    return np.maximum(np.asarray(x, dtype=float), 0.0)


def projected_gradient(x, g) -> np.ndarray:
    x = np.asarray(x, float)
    g = np.asarray(g, float)
    return np.where((x > 0) | (g > 0), g, 0.0)


def scaled_gradient_norm(x, g, value) -> float:
    """Relative stationarity measure ``|pg|_inf * max(1,|x|_inf) / max(1,|f|)``."""
    pg = projected_gradient(x, g)
    return float(np.max(np.abs(pg)) * max(1.0, np.max(np.abs(x))) / max(1.0, abs(value)))


class _Problem:
    """Objective, gradient and equilibrium cache for one optimization run."""

    def __init__(self, kind, config, solver, lam=0.0, floor=0.0):
        self.kind, self.config, self.solver = kind, config, solver
        self.lam, self.floor = lam, floor
        self.starts = None
        self.failures = 0

    def evaluate(self, x):
        prices = PricingDecision.from_vector(x)
        states = resolved_states(x, self.config, self.solver, self.starts)
        value = _objective_value(self.kind, self.lam, self.floor, prices, states, self.config)
        return value, states

    def gradient(self, x, states):
        try:
            bundles = [sensitivity_at(s, self.config, p, self.solver)
                       for s, p in zip(states, self.config.periods)]
        except IrregularEquilibriumError:
            log.warning("irregular equilibrium at %s; using finite differences", x)
            return finite_difference_gradient(lambda z: self.evaluate(z)[0], x), "fd"
        return objective_gradient(self.kind, states, bundles, self.config, self.lam), "ift"


def _gradient_ascent(problem: _Problem, x0, settings: OptimizerSettings):
    x = project(x0)
    value, states = problem.evaluate(x)
    problem.starts = [s.fixed_point_vars for s in states]
    g, how = problem.gradient(x, states)
    trace = []
    alpha = settings.initial_step / max(np.max(np.abs(g)), 1e-12)
    x_prev = g_prev = None
    converged = False
    it = 0
    for it in range(1, settings.max_iterations + 1):
        pgn = scaled_gradient_norm(x, g, value)
        trace.append({"iteration": it, "objective": value, "scaled_gradient": pgn,
                      "step": alpha, "gradient": how, **_price_columns(x)})
        if pgn <= settings.gradient_tolerance:
            converged = True
            break
        if x_prev is not None:
            s, y = x - x_prev, g - g_prev
            sy = float(s @ y)
            if sy < 0:
                alpha = float(s @ s) / -sy
            else:
                alpha = 2.0 * alpha
        accepted = False
        for _ in range(settings.max_backtracks):
            x_new = project(x + alpha * g)
            if np.array_equal(x_new, x):
                break
            try:
                v_new, st_new = problem.evaluate(x_new)
            except NonConvergenceError:
                problem.failures += 1
                if problem.failures > settings.max_solver_failures:
                    raise OptimizationAborted("equilibrium solver failed repeatedly")
                alpha *= settings.backtrack
                continue
            if v_new >= value + settings.armijo * float(g @ (x_new - x)):
                accepted = True
                break
            alpha *= settings.backtrack
        if not accepted:
            trace[-1]["note"] = "line search failed"
            break
        x_prev, g_prev = x, g
        x, value, states = x_new, v_new, st_new
        problem.starts = [s.fixed_point_vars for s in states]
        g, how = problem.gradient(x, states)
    pgn = scaled_gradient_norm(x, g, value)
    return x, value, states, g, pgn, converged, it, trace


def _price_columns(x):
    return {f"{'fare' if i % 2 == 0 else 'payment'}_{i // 2}": float(v) for i, v in enumerate(x)}


def _finish(kind_label, config, x, value, states, pgn, converged, it, trace, start=None):
    prices = PricingDecision.from_vector(x)
    return ScenarioResult(
        scenario=kind_label, prices=prices, states=states,
        daily_profit=daily_profit(prices, states, config),
        daily_welfare=daily_welfare(prices, states, config),
        objective=value, projected_gradient=pgn, converged=converged,
        iterations=it, start=start, trace=trace,
    )


def maximize(kind: str, config: MarketConfig, settings: OptimizerSettings | None = None,
             solver: SolverSettings | None = None, lam: float = 0.0, floor: float = 0.0,
             starts=None, label: str | None = None) -> ScenarioResult:
    """Multi-start projected gradient ascent of one objective.

    ``starts`` overrides ``settings.starts`` and may hold full price vectors.
    The best final objective over all starts is returned; the traces of all
    starts are concatenated with a ``start`` column.
    """
    settings = settings or OptimizerSettings()
    solver = solver or SolverSettings(tolerance=1e-10)
    n = config.n_periods
    if starts is None:
        starts = [np.tile(s, n) for s in settings.starts]
    best = None
    full_trace = []
    failures = []
    for si, x0 in enumerate(starts):
        problem = _Problem(kind, config, solver, lam, floor)
        try:
            out = _gradient_ascent(problem, np.asarray(x0, float), settings)
        except (NonConvergenceError, OptimizationAborted) as exc:
            failures.append((si, str(exc)))
            log.warning("start %d failed: %s", si, exc)
            continue
        for row in out[-1]:
            row["start"] = si
        full_trace.extend(out[-1])
        if best is None or out[1] > best[1]:
            best = (*out, si)
    if best is None:
        raise OptimizationAborted(f"all starts failed: {failures}")
    x, value, states, _, pgn, converged, it, trace, si = best
    x0 = np.asarray(starts[si], float)
    return _finish(label or kind, config, x, value, states, pgn, converged, it, full_trace,
                   start=(float(x0[0]), float(x0[1])))


def optimize(scenario: ScenarioSpec, config: MarketConfig) -> ScenarioResult:
    """Optimal prices for a scenario on ``config``."""
    if scenario.kind == "monopoly":
        return maximize("profit", config, scenario.optimizer, scenario.solver, label="monopoly")
    if scenario.kind == "first_best":
        return maximize("welfare", config, scenario.optimizer, scenario.solver, label="first_best")
    rho = config.econ.profit_floor_rate_rho if scenario.rho is None else scenario.rho
    return second_best_lambda_loop(config, rho, scenario)


def second_best_lambda_loop(config: MarketConfig, rho: float,
                            scenario: ScenarioSpec | None = None,
                            monopoly: ScenarioResult | None = None,
                            first_best: ScenarioResult | None = None) -> ScenarioResult:
    """Welfare maximization under the profit floor via bisection on the multiplier.

    For each trial multiplier ``lam`` the Lagrangian ``W + lam (profit - floor)``
    is maximized. The bracket ``[lo, hi]`` keeps ``lo`` infeasible and ``hi``
    feasible, so the returned prices always satisfy the floor; the loop stops
    once profit is within ``rel_tolerance`` of the floor.
    """
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    scenario = scenario or ScenarioSpec("second_best", rho=rho)
    opt, solver, lset = scenario.optimizer, scenario.solver, scenario.lambda_loop
    floor = rho * (config.econ.fleet_daily_cost + config.econ.fixed_cost_Cf)

    if monopoly is None:
        monopoly = maximize("profit", config, opt, solver, label="monopoly")
    if monopoly.daily_profit < floor:
        raise InfeasibleFloorError(
            f"profit floor {floor:.6g} exceeds the attainable maximum "
            f"{monopoly.daily_profit:.6g}", monopoly.daily_profit)
    if first_best is None:
        first_best = maximize("welfare", config, opt, solver, label="first_best")
    history = [{"lam": 0.0, "profit": first_best.daily_profit,
                "welfare": first_best.daily_welfare, "violation": max(0.0, floor - first_best.daily_profit)}]
    if first_best.daily_profit >= floor:
        return _second_best_result(first_best, floor, 0.0, history)

    def solve_at(lam, warm):
        starts = [r.prices.to_vector() for r in warm]
        res = maximize("lagrangian", config, opt, solver, lam=lam, floor=floor,
                       starts=starts, label="second_best")
        history.append({"lam": lam, "profit": res.daily_profit, "welfare": res.daily_welfare,
                        "violation": max(0.0, floor - res.daily_profit)})
        return res

    scale = max(abs(floor), 1.0)
    lo, lo_res = 0.0, first_best
    hi = lset.lam_max
    hi_res = solve_at(hi, [monopoly, first_best])
    if hi_res.daily_profit < floor:
        # the monopoly optimum is the lam -> infinity limit and is feasible
        hi_res = monopoly
    for _ in range(lset.max_bisections):
        if (hi_res.daily_profit - floor) / scale <= lset.rel_tolerance:
            break
        mid = 0.5 * (lo + hi)
        res = solve_at(mid, [hi_res, lo_res])
        if res.daily_profit >= floor:
            hi, hi_res = mid, res
        else:
            lo, lo_res = mid, res
    return _second_best_result(hi_res, floor, hi, history)


def _second_best_result(res: ScenarioResult, floor, lam, history) -> ScenarioResult:
    res = replace(res, scenario="second_best")
    res.profit_floor = floor
    res.constraint_slack = res.daily_profit - floor
    res.lam = lam
    res.lambda_history = list(history)
    return res
