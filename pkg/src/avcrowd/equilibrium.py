"""Stationary market equilibrium of one period at fixed prices.

The equilibrium is the fixed point of a map on four variables
``(t_r, n0, t_p, w_c)``: utilities give logit choice splits, splits give fleet
and demand, fleet and demand give the service rate and the vehicle idle time,
and the idle time feeds the matching, pick-up and congestion relations that
return new times. :func:`solve_equilibrium` iterates the damped map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import kinematics as kin
from .model import (
    CHOICE_CLASS, CLASS_LABELS, CLASSES, MarketConfig, PeriodSpec,
    class_probabilities, choice_mask, utility_vector,
)

log = logging.getLogger(__name__)

MASK_O = choice_mask(mode="O")
MASK_R = choice_mask(rental="R")
MASK_AN = choice_mask(mode="A", rental="N")
MASK_M = choice_mask(mode="M")
MASK_P = choice_mask(mode="P")
TRAVEL_CLASSES = tuple(c.label for c in CLASSES if c.has_travel_need)


class InfeasibleServiceError(ValueError):
    """On-demand trips requested while the platform has no vehicle."""


class NonConvergenceError(RuntimeError):
    def __init__(self, message, residual_trace):
        super().__init__(message)
        self.residual_trace = list(residual_trace)


@dataclass(frozen=True)
class SolverSettings:
    damping: float = 0.5
    max_iterations: int = 10_000
    tolerance: float = 1e-8
    demand_floor: float = 1e-6
    # initial (t_r, n0, t_p, w_c); t_r=None starts from free-flow trip time
    initial_trip_time: float | None = None
    initial_n0: float = 1.0
    initial_pickup: float = 0.05
    initial_wait: float = 0.05
    adaptive: bool = True
    min_damping: float = 1e-3
    # "picard", "block", or "hybrid" (Picard until it stalls, then block Newton)
    method: str = "hybrid"
    picard_iterations: int = 20
    # upper edge of the box [0, M1]^4 the block phase restarts in
    domain_bound: float = 10.0

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if not self.tolerance > 0 or not self.demand_floor > 0:
            raise ValueError("tolerance and demand_floor must be positive")
        if self.method not in ("picard", "block", "hybrid"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass
class EquilibriumState:
    """All endogenous variables of one period at a solution."""

    period: str
    fare: float
    payment: float
    trip_time_tr: float
    pickup_time_tp: float
    customer_wait_wc: float
    vehicle_idle_wt: float
    rides_per_vehicle_n0: float
    fleet_N: float
    rented_Nr: float
    demand_qo: float
    demand_qa: float
    demand_qm: float
    demand_qp: float
    utilities: np.ndarray
    probabilities: np.ndarray
    iterations: int = 0
    residual: float = 0.0
    residual_trace: list = field(default_factory=list)

    @property
    def fixed_point_vars(self) -> np.ndarray:
        return np.array([self.trip_time_tr, self.rides_per_vehicle_n0,
                         self.pickup_time_tp, self.customer_wait_wc])

    def class_probabilities(self, label: str) -> np.ndarray:
        return self.probabilities[CHOICE_CLASS == CLASS_LABELS.index(label)]


def supply_from_choices(probabilities, populations, N_s: float) -> tuple[float, float]:
    """(N_r, N): rented AVs and total platform fleet.

    ``probabilities`` is the global 21-vector and ``populations`` the per-class
    population vector (class order of :data:`CLASS_LABELS`).
    """
    weights = np.asarray(populations, float)[CHOICE_CLASS] * np.asarray(probabilities, float)
    N_r = float(weights[MASK_R].sum())
    return N_r, N_s + N_r


def demand_from_choices(probabilities, populations, h: float):
    """Hourly demands ``(q_o, q_a, q_m, q_p)``; ``q_a`` includes on-demand trips."""
    weights = np.asarray(populations, float)[CHOICE_CLASS] * np.asarray(probabilities, float)
    q_o = weights[MASK_O].sum() / h
    q_a = q_o + weights[MASK_AN].sum() / h
    q_m = weights[MASK_M].sum() / h
    q_p = weights[MASK_P].sum() / h
    return float(q_o), float(q_a), float(q_m), float(q_p)


def service_rate(N: float, q_o: float, h: float) -> float:
    """Rides served per platform vehicle within a decision window."""
    if N <= 0:
        if q_o > 0:
            raise InfeasibleServiceError("on-demand demand with an empty fleet")
        return 0.0
    return q_o * h / N


def idle_time(N: float, q_o: float, t_p: float, t_r: float) -> float:
    """Vehicle idle (searching) time from the service-time balance; may be negative."""
    return N / q_o - t_p - t_r


@dataclass
class _Evaluation:
    utilities: np.ndarray
    probabilities: np.ndarray
    N_r: float
    N: float
    q_o: float
    q_a: float
    q_m: float
    q_p: float
    w_t: float
    mapped: np.ndarray  # (t_r, n0, t_p, w_c) after one application


def _evaluate(x, fare, payment, config: MarketConfig, period: PeriodSpec,
              floor: float) -> _Evaluation:
    t_r, n0, t_p, w_c = x
    city, econ = config.city, config.econ
    service = config.service_available(period)
    h = period.decision_window_h
    pops = period.population_vector()
    v = utility_vector(t_r, t_p, w_c, n0, fare, payment, econ, service)
    pi = class_probabilities(v, config.logit)
    N_r, N = supply_from_choices(pi, pops, econ.prepurchased_Ns)
    q_o, q_a, q_m, q_p = demand_from_choices(pi, pops, h)
    if N > 0:
        n0_new = service_rate(N, q_o, h)
    else:
        n0_new = 0.0
    q_eff = max(q_o, floor)
    w_t = idle_time(N, q_eff, t_p, t_r)
    t_r_new = kin.trip_time(q_m, q_a, q_o, w_t, city)
    t_p_new = kin.pickup_time(w_t, q_eff, t_r_new, city)
    w_c_new = kin.customer_wait(q_eff, w_t, city)
    return _Evaluation(v, pi, N_r, N, q_o, q_a, q_m, q_p, w_t,
                       np.array([t_r_new, n0_new, t_p_new, w_c_new]))


def phi_map(current, fare: float, payment: float, config: MarketConfig, period: PeriodSpec,
            settings: SolverSettings | None = None) -> np.ndarray:
    """One application of the equilibrium map to ``(t_r, n0, t_p, w_c)``."""
    settings = settings or SolverSettings()
    x = np.asarray(current, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("phi_map needs finite inputs")
    return _evaluate(x, fare, payment, config, period, settings.demand_floor).mapped


def initial_point(config: MarketConfig, settings: SolverSettings) -> np.ndarray:
    t_r = settings.initial_trip_time
    if t_r is None:
        t_r = config.city.congestion_base_a
    return np.array([t_r, settings.initial_n0, settings.initial_pickup, settings.initial_wait])


def state_from_point(x, fare, payment, config, period, settings, iterations=0,
                     trace=None) -> EquilibriumState:
    ev = _evaluate(np.asarray(x, float), fare, payment, config, period, settings.demand_floor)
    residual = float(np.max(np.abs(ev.mapped - x)))
    t_r, n0, t_p, w_c = (float(v) for v in x)
    return EquilibriumState(
        period=period.name, fare=float(fare), payment=float(payment),
        trip_time_tr=t_r, pickup_time_tp=t_p, customer_wait_wc=w_c,
        vehicle_idle_wt=float(ev.w_t), rides_per_vehicle_n0=n0,
        fleet_N=ev.N, rented_Nr=ev.N_r,
        demand_qo=ev.q_o, demand_qa=ev.q_a, demand_qm=ev.q_m, demand_qp=ev.q_p,
        utilities=ev.utilities, probabilities=ev.probabilities,
        iterations=iterations, residual=residual, residual_trace=list(trace or []),
    )


def _wait_fixed_point(y, fare, payment, config, period, floor) -> float:
    """Customer wait consistent with the rest of the state ``y = (t_r, n0, t_p)``.

    Raising the wait lowers on-demand demand, which lengthens vehicle idle time
    and shortens the matched wait, so ``W_c(w_c) - w_c`` is strictly
    decreasing and has a single bracketed root.
    """
    def gap(w_c):
        x = np.array([y[0], y[1], y[2], w_c])
        return _evaluate(x, fare, payment, config, period, floor).mapped[3] - w_c

    lo, hi = 0.0, 1.0
    g_lo = gap(lo)
    if g_lo <= 0:
        return lo
    while gap(hi) > 0:
        lo, hi = hi, 2.0 * hi
        if hi > 1e12:
            raise NonConvergenceError("customer wait diverges", [])
    return brentq(gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)


def _block_residual(y, fare, payment, config, period, floor):
    """Map residual on ``(t_r, n0, t_p)`` with the wait solved exactly."""
    y = np.maximum(y, 0.0)
    w_c = _wait_fixed_point(y, fare, payment, config, period, floor)
    x = np.array([y[0], y[1], y[2], w_c])
    mapped = _evaluate(x, fare, payment, config, period, floor).mapped
    return x, mapped - x


def _block_newton(x, fare, payment, config, period, settings, trace, budget):
    """Newton on the three mild variables, the wait handled by root finding."""
    floor = settings.demand_floor
    y = np.clip(x[:3], 0.0, settings.domain_bound)
    x, gx = _block_residual(y, fare, payment, config, period, floor)
    for _ in range(budget):
        res = float(np.max(np.abs(gx)))
        trace.append(res)
        if res <= settings.tolerance:
            return x, True
        y, g3 = x[:3], gx[:3]
        J = np.empty((3, 3))
        for j in range(3):
            h = 1e-7 * max(1.0, abs(y[j]))
            yp = y.copy()
            yp[j] += h
            J[:, j] = (_block_residual(yp, fare, payment, config, period, floor)[1][:3] - g3) / h
        try:
            dy = np.linalg.solve(J, -g3)
        except np.linalg.LinAlgError:
            dy = g3
        if not np.all(np.isfinite(dy)):
            dy = g3
        merit = float(g3 @ g3)
        t = 1.0
        accepted = False
        for _ in range(12):
            yt = np.clip(y + t * dy, 0.0, settings.domain_bound)
            xt, gt = _block_residual(yt, fare, payment, config, period, floor)
            if float(gt[:3] @ gt[:3]) <= (1.0 - 1e-4 * t) * merit:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # the damped block map contracts globally; take a few of its steps
            xt, gt = x, gx
            for _ in range(5):
                yt = np.clip(xt[:3] + settings.damping * gt[:3], 0.0, settings.domain_bound)
                xt, gt = _block_residual(yt, fare, payment, config, period, floor)
        x, gx = xt, gt
    return x, False


def solve_equilibrium(fare: float, payment: float, config: MarketConfig, period: PeriodSpec,
                      settings: SolverSettings | None = None, start=None) -> EquilibriumState:
    """Fixed point of the equilibrium map at prices ``(fare, payment)``.

    Damped iteration ``x <- (1-lam) x + lam Phi(x)`` runs first. Where the map
    is strongly expansive (a starved fleet makes the customer wait react
    violently to the idle time) the damped iteration stalls; after
    ``settings.picard_iterations`` non-improving steps the solver switches to
    a block scheme that solves the wait exactly by bracketing and applies
    Newton's method to the remaining variables ``(t_r, n0, t_p)``. Both phases
    share the stopping rule ``max |Phi(x) - x| <= settings.tolerance``;
    otherwise :class:`NonConvergenceError` carries the residual trace.
    """
    settings = settings or SolverSettings()
    if fare < 0 or payment < 0:
        raise ValueError("prices must be nonnegative")
    floor = settings.demand_floor
    x = initial_point(config, settings) if start is None else np.array(start, dtype=float)
    lam = settings.damping
    trace: list[float] = []
    best, best_x = np.inf, x.copy()
    stalled = 0
    block = settings.method == "block"

    for it in range(1, settings.max_iterations + 1):
        if block:
            x, ok = _block_newton(x, fare, payment, config, period, settings, trace,
                                  settings.max_iterations - it + 1)
            if ok:
                return state_from_point(x, fare, payment, config, period, settings, len(trace), trace)
            break
        mapped = _evaluate(x, fare, payment, config, period, floor).mapped
        if not np.all(np.isfinite(mapped)):
            raise NonConvergenceError("non-finite iterate in equilibrium map", trace)
        gx = mapped - x
        res = float(np.max(np.abs(gx)))
        trace.append(res)
        if res <= settings.tolerance:
            return state_from_point(x, fare, payment, config, period, settings, it, trace)
        if res < best * (1.0 - 1e-3):
            best, best_x, stalled = res, x.copy(), 0
        else:
            stalled += 1
        if settings.method == "hybrid" and (stalled >= settings.picard_iterations
                                            or res > 10.0 * best):
            block = True
            x = np.clip(best_x, 0.0, settings.domain_bound)
            continue
        if settings.adaptive and len(trace) > 1 and res > trace[-2]:
            lam = max(0.5 * lam, settings.min_damping)
        elif settings.adaptive:
            lam = min(settings.damping, 1.25 * lam)
        x = x + lam * gx
    raise NonConvergenceError(
        f"equilibrium not reached in {settings.max_iterations} iterations "
        f"(residual {trace[-1]:.3e})", trace)
