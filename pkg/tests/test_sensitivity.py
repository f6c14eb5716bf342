import numpy as np
import pytest

from avcrowd.equilibrium import SolverSettings, solve_equilibrium
from avcrowd.model import (
    CLASS_SLICES, N_CHOICES, CityParams, EconomicParams, LogitSpec, MarketConfig, PeriodSpec,
    PricingDecision, logit_probability_jacobian, utility_vector,
)
from avcrowd.scenarios import _objective_value
from avcrowd.sensitivity import (
    F_PI0, N_VARS, PI0, Q_O, V0, IrregularEquilibriumError, equilibrium_sensitivity,
    finite_difference_gradient, objective_gradient, period_money_flow, period_welfare,
    probability_derivative, residual, residual_jacobian, resolved_states, sensitivity_at, state_vector,
)

TIGHT = SolverSettings(tolerance=1e-13)


@pytest.fixture(scope="module")
def peak_state(default_market):
    period = default_market.periods[0]
    return solve_equilibrium(22.0, 12.0, default_market, period, TIGHT), period


def test_probability_derivative_two_equal_choices():
    d = probability_derivative([2.0, 2.0], 1.0)
    assert np.allclose(d, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-15)


def test_probability_derivative_zero_scale():
    assert np.all(probability_derivative([1.0, -4.0, 3.0], 0.0) == 0.0)


def test_probability_derivative_matches_matrix_form():
    v = np.array([-12.0, -15.5, -11.0, -30.0])
    assert np.allclose(probability_derivative(v, 0.3), logit_probability_jacobian(v, 0.3),
                       atol=1e-15)


def test_probability_block_column_sums_vanish(peak_state, default_market):
    state, period = peak_state
    J, _ = residual_jacobian(state, default_market, period, TIGHT)
    block = J[F_PI0:F_PI0 + N_CHOICES, V0:PI0]  # probability rows against utility columns
    for sl in CLASS_SLICES:
        sums = block[sl, sl].sum(axis=0)
        assert np.max(np.abs(sums)) <= 1e-12


def test_jacobian_matches_finite_differences(peak_state, default_market):
    state, period = peak_state
    J, Jth = residual_jacobian(state, default_market, period, TIGHT)
    tau = state_vector(state)

    def f(t, fare=state.fare, pay=state.payment):
        return residual(t, fare, pay, default_market, period, TIGHT.demand_floor)

    scale_f = np.maximum(np.max(np.abs(J), axis=1), 1e-300)
    for j in range(N_VARS):
        h = 1e-6 * max(1.0, abs(tau[j]))
        e = np.zeros(N_VARS)
        e[j] = h
        col = (f(tau + e) - f(tau - e)) / (2 * h)
        # entrywise, relative to the size of each residual row
        assert np.all(np.abs(col - J[:, j]) <= 1e-4 * scale_f), j
    for j, (df, dp) in enumerate([(1e-4, 0.0), (0.0, 1e-4)]):
        col = (f(tau, state.fare + df, state.payment + dp)
               - f(tau, state.fare - df, state.payment - dp)) / 2e-4
        assert np.allclose(col, Jth[:, j], atol=1e-6)


def test_linear_solve_residual(peak_state, default_market):
    state, period = peak_state
    b = sensitivity_at(state, default_market, period, TIGHT)
    r = b.J_tau @ b.S + b.J_theta
    assert np.max(np.abs(r)) <= 1e-10 * np.max(np.abs(b.J_theta))
    assert b.condition < 1e12


@pytest.mark.parametrize("k", [0, 1])
@pytest.mark.parametrize("j", [0, 1])
def test_sensitivity_first_order_against_resolves(default_market, j, k):
    period = default_market.periods[k]
    s = solve_equilibrium(22.0, 12.0, default_market, period, TIGHT)
    S = sensitivity_at(s, default_market, period, TIGHT).S
    errs = []
    for h in (1e-2, 1e-3, 1e-4):
        prices = [22.0 + h * (j == 0), 12.0 + h * (j == 1)]
        s2 = solve_equilibrium(*prices, default_market, period, TIGHT, start=s.fixed_point_vars)
        errs.append(abs(s2.demand_qo - s.demand_qo - S[Q_O, j] * h))
    orders = [np.log10(errs[i] / errs[i + 1]) for i in range(2)]
    assert min(orders) >= 1.9


def test_dead_payment_without_owners():
    pops = {"n": 2e5, "r": 8e4}
    m = MarketConfig(CityParams(), EconomicParams(prepurchased_Ns=3000.0),
                     (PeriodSpec("p", 24.0, pops),), LogitSpec())
    s = solve_equilibrium(15.0, 9.0, m, m.periods[0], TIGHT)
    S = sensitivity_at(s, m, m.periods[0], TIGHT).S
    # times, fleet and demands do not react to the payment; nobody can rent
    assert np.max(np.abs(S[:V0, 1])) <= 1e-10


def test_symmetric_periods_identical_blocks(default_market):
    per = default_market.periods[0]
    m = MarketConfig(default_market.city, default_market.econ,
                     (PeriodSpec("x", 12.0, per.populations), PeriodSpec("y", 12.0, per.populations)),
                     default_market.logit)
    states = resolved_states([20.0, 10.0, 20.0, 10.0], m, TIGHT)
    S = [sensitivity_at(s, m, p, TIGHT).S for s, p in zip(states, m.periods)]
    assert np.max(np.abs(S[0] - S[1])) <= 1e-10 * max(1.0, np.max(np.abs(S[0])))


def test_singular_jacobian_flagged():
    J = np.eye(4)
    J[3] = J[2]
    with pytest.raises(IrregularEquilibriumError):
        equilibrium_sensitivity(J, np.ones((4, 2)))


def test_unconverged_state_rejected(default_market):
    period = default_market.periods[0]
    s = solve_equilibrium(20.0, 10.0, default_market, period)
    s.trip_time_tr += 0.01
    with pytest.raises(ValueError):
        residual_jacobian(s, default_market, period)


# --- objectives -----------------------------------------------------------------


def _objective(kind, market, lam=0.3, floor=1e6, starts=None, settings=TIGHT):
    def f(x):
        st = resolved_states(x, market, settings, starts)
        return _objective_value(kind, lam, floor, PricingDecision.from_vector(x), st, market)
    return f


@pytest.mark.parametrize("kind", ["profit", "welfare", "lagrangian"])
def test_objective_gradient_matches_resolves(default_market, kind):
    x = np.array([24.0, 13.0, 18.0, 9.0])
    states = resolved_states(x, default_market, TIGHT)
    bundles = [sensitivity_at(s, default_market, p, TIGHT) for s, p in zip(states, default_market.periods)]
    g = objective_gradient(kind, states, bundles, default_market, 0.3)
    fd = finite_difference_gradient(_objective(kind, default_market,
                                               starts=[s.fixed_point_vars for s in states]), x)
    assert np.max(np.abs(g - fd)) <= 1e-3 * np.max(np.abs(fd))


def test_profit_rises_from_zero_fare(default_market):
    x = np.array([0.0, 10.0, 0.0, 10.0])
    loose = SolverSettings(tolerance=1e-10)
    states = resolved_states(x, default_market, loose)
    bundles = [sensitivity_at(s, default_market, p, loose) for s, p in zip(states, default_market.periods)]
    g = objective_gradient("profit", states, bundles, default_market)
    assert g[0] > 0 and g[2] > 0
    f = _objective("profit", default_market, settings=loose)
    assert f(x + np.array([0.5, 0, 0, 0])) > f(x)


def test_unknown_objective():
    with pytest.raises(ValueError):
        objective_gradient("revenue", [], [], None)


def _single_class_market(mu):
    return MarketConfig(CityParams(), EconomicParams(), (PeriodSpec("p", 24.0, {"n": 100.0}),),
                        LogitSpec.uniform(mu))


class _FrozenState:
    """Just the fields welfare needs, without solving anything."""

    def __init__(self, utilities, fare=0.0, payment=0.0, qo=0.0, Nr=0.0, n0=0.0):
        self.utilities = np.asarray(utilities, float)
        self.fare, self.payment = fare, payment
        self.demand_qo, self.rented_Nr, self.rides_per_vehicle_n0 = qo, Nr, n0


def test_welfare_single_class_logsum():
    m = _single_class_market(0.5)
    v = np.full(21, -50.0)
    v[0], v[1] = -5.0, -10.0  # class n: (O,-), (P,-)
    w = period_welfare(_FrozenState(v), m, m.periods[0])
    oracle = 100.0 * 2.0 * np.log(np.exp(-2.5) + np.exp(-5.0))
    assert w == pytest.approx(oracle, abs=1e-9)


def test_welfare_requires_positive_scale():
    m = _single_class_market(0.0)
    with pytest.raises(ValueError):
        period_welfare(_FrozenState(np.zeros(21)), m, m.periods[0])


def test_welfare_money_neutral(default_market):
    # raising the fare at fixed times moves money from riders to the platform;
    # the logsum loss and the revenue gain cancel to first order
    period = default_market.periods[0]
    s = solve_equilibrium(20.0, 10.0, default_market, period, TIGHT)
    base = period_welfare(s, default_market, period)
    d = 1e-4
    v = utility_vector(s.trip_time_tr, s.pickup_time_tp, s.customer_wait_wc,
                       s.rides_per_vehicle_n0, s.fare + d, s.payment, default_market.econ)
    moved = _FrozenState(v, s.fare + d, s.payment, s.demand_qo, s.rented_Nr, s.rides_per_vehicle_n0)
    change = period_welfare(moved, default_market, period) - base
    transfer = d * s.demand_qo * period.decision_window_h
    # what is left is the second-order logsum curvature, O(d^2)
    assert abs(change) <= 1e-3 * transfer
    riders = period_welfare(moved, default_market, period) - period_money_flow(moved, period)
    assert riders - (base - period_money_flow(s, period)) == pytest.approx(-transfer, rel=1e-3)
