"""Residual system of one period, its Jacobians, and price sensitivities.

Variable layout of ``tau`` (53 entries per period)::

    0 t_r   1 t_p   2 w_c   3 w_t   4 n0   5 N_r   6 N
    7 q_o   8 q_a   9 q_m  10 q_p
    11..31  utilities V (global choice order)
    32..52  probabilities pi (global choice order)

Residual layout: 21 utility rows, 21 probability rows, 8 supply/demand rows
(N_r, N, q_o, q_a, q_m, q_p, n0, w_t), 3 traffic rows (w_c, t_p, t_r). Every
row is written as ``variable - expression`` so it is dimensioned like the
variable it determines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kinematics as kin
from .equilibrium import (
    MASK_AN, MASK_M, MASK_O, MASK_P, MASK_R, EquilibriumState, SolverSettings,
    solve_equilibrium,
)
from .model import (
    CHOICE_CLASS, CHOICE_MODE, CLASS_SLICES, N_CHOICES, MarketConfig, PeriodSpec,
    class_logsums, class_probabilities, probability_jacobian_blocks, utility_vector,
)

T_R, T_P, W_C, W_T, N0, N_R, N_TOT, Q_O, Q_A, Q_M, Q_P = range(11)
V0 = 11
PI0 = V0 + N_CHOICES
N_VARS = PI0 + N_CHOICES
F_U0, F_PI0, F_N0 = 0, N_CHOICES, 2 * N_CHOICES
F_T0 = F_N0 + 8
VAR_NAMES = (
    ["t_r", "t_p", "w_c", "w_t", "n0", "N_r", "N", "q_o", "q_a", "q_m", "q_p"]
    + [f"V[{i}]" for i in range(N_CHOICES)] + [f"pi[{i}]" for i in range(N_CHOICES)]
)

CONDITION_LIMIT = 1e12


class IrregularEquilibriumError(ArithmeticError):
    """The residual Jacobian is singular or too ill-conditioned to invert."""


def state_vector(state: EquilibriumState) -> np.ndarray:
    head = [state.trip_time_tr, state.pickup_time_tp, state.customer_wait_wc,
            state.vehicle_idle_wt, state.rides_per_vehicle_n0, state.rented_Nr, state.fleet_N,
            state.demand_qo, state.demand_qa, state.demand_qm, state.demand_qp]
    return np.concatenate([head, state.utilities, state.probabilities])


def _weights(period: PeriodSpec) -> np.ndarray:
    return period.population_vector()[CHOICE_CLASS]


def residual(tau, fare, payment, config: MarketConfig, period: PeriodSpec,
             demand_floor: float = 1e-6) -> np.ndarray:
    """Residual vector ``f(tau; fare, payment)``; zero at an equilibrium."""
    tau = np.asarray(tau, dtype=float)
    t_r, t_p, w_c, w_t, n0, N_r, N, q_o, q_a, q_m, q_p = tau[:11]
    v = tau[V0:PI0]
    pi = tau[PI0:]
    city, econ = config.city, config.econ
    h = period.decision_window_h
    d = _weights(period) * pi
    q_eff = max(q_o, demand_floor)
    f = np.empty(N_VARS)
    f[F_U0:F_PI0] = v - utility_vector(t_r, t_p, w_c, n0, fare, payment, econ,
                                       config.service_available(period))
    f[F_PI0:F_N0] = pi - class_probabilities(v, config.logit)
    f[F_N0 + 0] = N_r - d[MASK_R].sum()
    f[F_N0 + 1] = N - econ.prepurchased_Ns - N_r
    f[F_N0 + 2] = q_o - d[MASK_O].sum() / h
    f[F_N0 + 3] = q_a - q_o - d[MASK_AN].sum() / h
    f[F_N0 + 4] = q_m - d[MASK_M].sum() / h
    f[F_N0 + 5] = q_p - d[MASK_P].sum() / h
    f[F_N0 + 6] = n0 - (q_o * h / N if N > 0 else 0.0)
    f[F_N0 + 7] = w_t - (N / q_eff - t_p - t_r)
    f[F_T0 + 0] = w_c - kin.customer_wait(q_eff, w_t, city)
    f[F_T0 + 1] = t_p - city.theta * kin.xi_fleet(city).value(w_t * q_eff) * t_r
    flow = kin.effective_flow(q_m, q_a, q_o, w_t, city)
    f[F_T0 + 2] = t_r - (city.congestion_base_a + city.congestion_coeff_b * flow**2)
    return f


def probability_derivative(utilities, mu: float) -> np.ndarray:
    """d pi / d V of one flat-logit class, term by term.

    Own entries ``mu e^{mu V_m} (S - e^{mu V_m}) / S^2``; cross entries
    ``-mu e^{mu V_m} e^{mu V_w} / S^2`` with ``S = sum e^{mu V}``.
    """
    v = np.asarray(utilities, dtype=float)
    e = np.exp(mu * (v - v.max()))
    s = e.sum()
    out = -mu * np.outer(e, e) / s**2
    out[np.diag_indices(v.size)] = mu * e * (s - e) / s**2
    return out


def residual_jacobian(state: EquilibriumState, config: MarketConfig, period: PeriodSpec,
                      settings: SolverSettings | None = None,
                      check_converged: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Analytic ``(d f / d tau, d f / d (fare, payment))`` at an equilibrium."""
    settings = settings or SolverSettings()
    tau = state_vector(state)
    fare, payment = state.fare, state.payment
    if check_converged:
        r = np.max(np.abs(residual(tau, fare, payment, config, period, settings.demand_floor)))
        if not r <= max(settings.tolerance, 1e-8) * 10:
            raise ValueError(f"state is not an equilibrium (residual {r:.3e})")
    t_r, t_p, w_c, w_t, n0, N_r, N, q_o, q_a, q_m, q_p = tau[:11]
    v = tau[V0:PI0]
    city, econ = config.city, config.econ
    h = period.decision_window_h
    service = config.service_available(period)
    w = _weights(period)
    floor_on = 1.0 if q_o > settings.demand_floor else 0.0
    q_eff = max(q_o, settings.demand_floor)

    J = np.zeros((N_VARS, N_VARS))
    Jth = np.zeros((N_VARS, 2))

    # utilities
    for k in range(N_CHOICES):
        row = F_U0 + k
        J[row, V0 + k] = 1.0
        mode = CHOICE_MODE[k]
        if mode == "O" and service:
            J[row, T_R] = econ.beta_A
            J[row, T_P] = econ.gamma
            J[row, W_C] = econ.gamma
            Jth[row, 0] = 1.0
        elif mode == "A":
            J[row, T_R] = econ.beta_A
        elif mode == "M":
            J[row, T_R] = econ.beta_M
        if MASK_R[k]:
            J[row, N0] = -payment
            Jth[row, 1] = -n0

    # probabilities
    J[F_PI0:F_N0, PI0:] = np.eye(N_CHOICES)
    for sl, block in zip(CLASS_SLICES, probability_jacobian_blocks(v, config.logit)):
        J[F_PI0 + sl.start:F_PI0 + sl.stop, V0 + sl.start:V0 + sl.stop] = -block

    # supply and demand
    r = F_N0
    J[r, N_R] = 1.0
    J[r, PI0:] = -w * MASK_R
    J[r + 1, N_TOT] = 1.0
    J[r + 1, N_R] = -1.0
    J[r + 2, Q_O] = 1.0
    J[r + 2, PI0:] = -w * MASK_O / h
    J[r + 3, Q_A] = 1.0
    J[r + 3, Q_O] = -1.0
    J[r + 3, PI0:] = -w * MASK_AN / h
    J[r + 4, Q_M] = 1.0
    J[r + 4, PI0:] = -w * MASK_M / h
    J[r + 5, Q_P] = 1.0
    J[r + 5, PI0:] = -w * MASK_P / h
    J[r + 6, N0] = 1.0
    if N > 0:
        J[r + 6, Q_O] = -h / N
        J[r + 6, N_TOT] = q_o * h / N**2
    J[r + 7, W_T] = 1.0
    J[r + 7, N_TOT] = -1.0 / q_eff
    J[r + 7, Q_O] = N / q_eff**2 * floor_on
    J[r + 7, T_P] = 1.0
    J[r + 7, T_R] = 1.0

    # traffic
    r = F_T0
    dwc_dq, dwc_dwt = kin.customer_wait_partials(q_eff, w_t, city)
    J[r, W_C] = 1.0
    J[r, Q_O] = -dwc_dq * floor_on
    J[r, W_T] = -dwc_dwt
    dtp_dwt, dtp_dq, dtp_dtr = kin.pickup_time_partials(w_t, q_eff, t_r, city)
    J[r + 1, T_P] = 1.0
    J[r + 1, W_T] = -dtp_dwt
    J[r + 1, Q_O] = -dtp_dq * floor_on
    J[r + 1, T_R] = -dtp_dtr
    dtr_dqm, dtr_dqa, dtr_dqo, dtr_dwt = kin.trip_time_partials(q_m, q_a, q_o, w_t, city)
    J[r + 2, T_R] = 1.0
    J[r + 2, Q_M] = -dtr_dqm
    J[r + 2, Q_A] = -dtr_dqa
    J[r + 2, Q_O] = -dtr_dqo
    J[r + 2, W_T] = -dtr_dwt
    return J, Jth


def _equilibrated(J: np.ndarray) -> np.ndarray:
    """Row and column max-abs scaling, used for the conditioning test only."""
    rows = np.max(np.abs(J), axis=1)
    rows[rows == 0] = 1.0
    A = J / rows[:, None]
    cols = np.max(np.abs(A), axis=0)
    cols[cols == 0] = 1.0
    return A / cols[None, :]


def condition_estimate(J: np.ndarray) -> float:
    return float(np.linalg.cond(_equilibrated(J)))


@dataclass
class JacobianBundle:
    J_tau: np.ndarray
    J_theta: np.ndarray
    S: np.ndarray
    condition: float

    def column(self, var: int) -> np.ndarray:
        """Sensitivity of one tau entry to (fare, payment)."""
        return self.S[var]


def equilibrium_sensitivity(J_tau: np.ndarray, J_theta: np.ndarray) -> JacobianBundle:
    """Solve ``J_tau S = -J_theta`` (LU with partial pivoting)."""
    cond = condition_estimate(J_tau)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise IrregularEquilibriumError(f"residual Jacobian condition estimate {cond:.3e}")
    S = np.linalg.solve(J_tau, -J_theta)
    return JacobianBundle(J_tau, J_theta, S, cond)


def sensitivity_at(state, config, period, settings=None) -> JacobianBundle:
    J, Jth = residual_jacobian(state, config, period, settings)
    return equilibrium_sensitivity(J, Jth)


# ---------------------------------------------------------------------------
# objective gradients


def period_money_flow(state: EquilibriumState, period: PeriodSpec) -> float:
    """Platform net revenue per decision window: fares in minus owner payments out."""
    h = period.decision_window_h
    return (state.fare * state.demand_qo * h
            - state.rented_Nr * state.payment * state.rides_per_vehicle_n0)


def _money_partials(state: EquilibriumState, period: PeriodSpec):
    """(explicit d/d(fare, payment), d/d tau) of the per-window money flow."""
    h = period.decision_window_h
    explicit = np.array([state.demand_qo * h,
                         -state.rented_Nr * state.rides_per_vehicle_n0])
    dtau = np.zeros(N_VARS)
    dtau[Q_O] = state.fare * h
    dtau[N_R] = -state.payment * state.rides_per_vehicle_n0
    dtau[N0] = -state.rented_Nr * state.payment
    return explicit, dtau


def period_welfare(state: EquilibriumState, config: MarketConfig, period: PeriodSpec) -> float:
    """Welfare per decision window: population-weighted logsums plus money flow."""
    logsums = class_logsums(state.utilities, config.logit)
    return float(period.population_vector() @ logsums) + period_money_flow(state, period)


def objective_gradient(kind: str, states, bundles, config: MarketConfig,
                       lam: float = 0.0) -> np.ndarray:
    """Total derivative of a daily objective over ``(F_1, p_1, F_2, p_2, ...)``.

    ``kind`` is ``"profit"``, ``"welfare"`` or ``"lagrangian"`` (welfare plus
    ``lam`` times profit; the constant floor does not affect the gradient).
    """
    if kind not in ("profit", "welfare", "lagrangian"):
        raise ValueError(f"unknown objective {kind!r}")
    grad = np.zeros(2 * len(states))
    for k, (state, bundle, period) in enumerate(zip(states, bundles, config.periods)):
        scale = period.duration_Hk / period.decision_window_h
        m_exp, m_tau = _money_partials(state, period)
        w_exp = m_exp.copy()
        w_tau = m_tau.copy()
        w_tau[V0:PI0] = _weights(period) * state.probabilities
        if kind == "profit":
            exp_, tau_ = m_exp, m_tau
        elif kind == "welfare":
            exp_, tau_ = w_exp, w_tau
        else:
            exp_, tau_ = w_exp + lam * m_exp, w_tau + lam * m_tau
        grad[2 * k:2 * k + 2] = scale * (exp_ + tau_ @ bundle.S)
    return grad


def finite_difference_gradient(func, x, rel_step: float = 1e-4, lower=0.0) -> np.ndarray:
    """Central differences with step ``rel_step * max(1, |x_i|)``.

    Near the nonnegativity bound the stencil is shifted to stay feasible.
    """
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        step = rel_step * max(1.0, abs(x[i]))
        centre = max(x[i], lower + step) if lower is not None else x[i]
        xp, xm = x.copy(), x.copy()
        xp[i] = centre + step
        xm[i] = centre - step
        grad[i] = (func(xp) - func(xm)) / (2 * step)
    return grad


def resolved_states(prices, config, settings=None, starts=None):
    """Equilibria of every period at interleaved prices ``(F_1, p_1, ...)``."""
    x = np.asarray(prices, dtype=float)
    states = []
    for k, period in enumerate(config.periods):
        start = None if starts is None else starts[k]
        states.append(solve_equilibrium(x[2 * k], x[2 * k + 1], config, period, settings, start))
    return states
