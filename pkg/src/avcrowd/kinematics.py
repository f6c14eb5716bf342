"""Matching, pick-up and congestion relations with smoothed negative powers.

Negative powers of the vehicle idle time ``w_t`` and of the idle fleet
``w_t * q_o`` blow up (or turn complex) as their arguments reach zero. Each is
replaced by :class:`SmoothedPower`, which is the power itself above a threshold
``epsilon`` and its tangent line below, so the equilibrium map stays real and
continuously differentiable while iterates pass through unphysical values.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import CityParams


@dataclass(frozen=True)
class SmoothedPower:
    exponent: float
    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.exponent < 0:
            raise ValueError("SmoothedPower is meant for negative exponents")

    def value(self, x: float) -> float:
        e, eps = self.exponent, self.epsilon
        if x >= eps:
            return x ** e
        return eps ** e + e * eps ** (e - 1.0) * (x - eps)

    def deriv(self, x: float) -> float:
        e, eps = self.exponent, self.epsilon
        if x >= eps:
            return e * x ** (e - 1.0)
        return e * eps ** (e - 1.0)

    __call__ = value


def xi_eval(sp: SmoothedPower, x: float) -> float:
    return sp.value(x)


def xi_deriv(sp: SmoothedPower, x: float) -> float:
    return sp.deriv(x)


def xi_wait(city: CityParams) -> SmoothedPower:
    """Smoothed ``w_t ** (-alpha1/alpha2)`` from the matching function."""
    return SmoothedPower(-city.matching_alpha1 / city.matching_alpha2, city.epsilon_wait)


def xi_fleet(city: CityParams) -> SmoothedPower:
    """Smoothed ``(w_t q_o) ** (-1/2)`` from the pick-up geometry."""
    return SmoothedPower(-0.5, city.epsilon_idle_fleet)


def _wait_scale(q_o: float, city: CityParams) -> float:
    a1, a2 = city.matching_alpha1, city.matching_alpha2
    return q_o ** ((1.0 - a1 - a2) / a2) * city.matching_A ** (-1.0 / a2)


def customer_wait(q_o: float, w_t: float, city: CityParams) -> float:
    """Average customer matching time (h) from the Cobb-Douglas matching function."""
    if q_o <= 0:
        raise ValueError("customer_wait needs q_o > 0; substitute the demand floor")
    return _wait_scale(q_o, city) * xi_wait(city).value(w_t)


def customer_wait_partials(q_o: float, w_t: float, city: CityParams) -> tuple[float, float]:
    """(d w_c / d q_o, d w_c / d w_t)."""
    a1, a2 = city.matching_alpha1, city.matching_alpha2
    xi = xi_wait(city)
    scale = _wait_scale(q_o, city)
    d_q = (1.0 - a1 - a2) / a2 * scale / q_o * xi.value(w_t)
    return d_q, scale * xi.deriv(w_t)


def pickup_time(w_t: float, q_o: float, t_r: float, city: CityParams) -> float:
    """Average pick-up time (h), proportional to the trip time."""
    if t_r < 0:
        raise ValueError("trip time must be nonnegative")
    return city.theta * xi_fleet(city).value(w_t * q_o) * t_r


def pickup_time_partials(w_t, q_o, t_r, city) -> tuple[float, float, float]:
    """(d t_p / d w_t, d t_p / d q_o, d t_p / d t_r)."""
    xi = xi_fleet(city)
    x = w_t * q_o
    slope = city.theta * xi.deriv(x) * t_r
    return slope * q_o, slope * w_t, city.theta * xi.value(x)


def effective_flow(q_m, q_a, q_o, w_t, city: CityParams) -> float:
    """Congestion-equivalent vehicle flow, counting dead-heading of on-demand AVs."""
    alpha = city.av_occupation_alpha
    return q_m + alpha * (q_a - q_o) + alpha * q_o * (1.0 + city.theta * xi_fleet(city).value(w_t * q_o))


def trip_time(q_m: float, q_a: float, q_o: float, w_t: float, city: CityParams) -> float:
    """Average in-vehicle trip time (h) under the quadratic congestion function."""
    if q_a < q_o - 1e-9 * max(1.0, abs(q_o)):
        raise ValueError("private-AV demand q_a must include on-demand trips (q_a >= q_o)")
    x = effective_flow(q_m, q_a, q_o, w_t, city)
    return city.congestion_base_a + city.congestion_coeff_b * x * x


def trip_time_partials(q_m, q_a, q_o, w_t, city) -> tuple[float, float, float, float]:
    """(d t_r / d q_m, d q_a, d q_o, d w_t), with q_o entering the flow directly."""
    alpha, theta = city.av_occupation_alpha, city.theta
    xi = xi_fleet(city)
    arg = w_t * q_o
    x = effective_flow(q_m, q_a, q_o, w_t, city)
    dt_dx = 2.0 * city.congestion_coeff_b * x
    dx_dqo = alpha * theta * (xi.value(arg) + q_o * xi.deriv(arg) * w_t)
    dx_dwt = alpha * theta * q_o * xi.deriv(arg) * q_o
    return dt_dx, dt_dx * alpha, dt_dx * dx_dqo, dt_dx * dx_dwt
