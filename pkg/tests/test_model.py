import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avcrowd.model import (
    CHOICES, CLASS_BY_LABEL, CLASS_LABELS, CLASS_SLICES, CLASSES, EconomicParams, LogitSpec,
    N_CHOICES, PeriodSpec, PricingDecision, assemble_utilities, class_logsum, class_probabilities,
    logit_probabilities, logit_probability_jacobian, nested_logit_probabilities, nested_logsum,
    nested_probability_jacobian, utility_vector,
)

utils = st.lists(st.floats(-200, 200, allow_nan=False), min_size=1, max_size=8)
scales = st.floats(0.01, 3.0)


def softmax_oracle(v, mu):
    e = [math.exp(mu * x) for x in v]
    s = sum(e)
    return [x / s for x in e]


# --- choice sets and utilities --------------------------------------------


def test_choice_sets():
    expected = {
        "n": [("O", "-"), ("P", "-")],
        "r": [("O", "-"), ("M", "-"), ("P", "-")],
        "a": [("A", "N"), ("O", "N"), ("O", "R"), ("P", "N"), ("P", "R")],
        "a'": [("-", "N"), ("-", "R")],
        "b": [("A", "N"), ("M", "N"), ("M", "R"), ("O", "N"), ("O", "R"), ("P", "N"), ("P", "R")],
        "b'": [("-", "N"), ("-", "R")],
    }
    assert CLASS_LABELS == ("n", "r", "a", "a'", "b", "b'")
    for c in CLASSES:
        assert list(c.choice_set) == expected[c.label]
    assert N_CHOICES == 21
    assert [lab for lab, _, _ in CHOICES] == [c.label for c in CLASSES for _ in c.choice_set]


def test_rental_only_utility():
    econ = EconomicParams(sharing_cost_m=20)
    v = assemble_utilities(CLASS_BY_LABEL["a'"], 0.6, 0.04, 0.05, 10, 10, 3, econ)
    assert v[("-", "R")] == pytest.approx(10.0)
    assert v[("-", "N")] == 0.0


def test_transit_utility():
    v = assemble_utilities(CLASS_BY_LABEL["n"], 0.6, 0.04, 0.05, 10, 10, 3, EconomicParams())
    assert v[("P", "-")] == pytest.approx(-36.0)


def test_on_demand_with_rental_utility():
    v = assemble_utilities(CLASS_BY_LABEL["a"], 0.6, 0.04, 0.05, 10, 10, 3, EconomicParams())
    assert v[("O", "R")] == pytest.approx(-10 - 12 - 2.7 + 10)


def test_utility_vector_matches_per_class_assembly():
    econ = EconomicParams()
    v = utility_vector(0.55, 0.03, 0.07, 1.6, 22.0, 11.0, econ)
    for cls, sl in zip(CLASSES, CLASS_SLICES):
        d = assemble_utilities(cls, 0.55, 0.03, 0.07, 1.6, 22.0, 11.0, econ)
        assert list(v[sl]) == [d[c] for c in cls.choice_set]


def test_no_service_sentinel():
    v = utility_vector(0.5, 0.0, 0.0, 0.0, 10.0, 5.0, EconomicParams(), service=False)
    o = np.array([m == "O" for _, m, _ in CHOICES])
    assert np.all(v[o] <= -1e5)
    p = class_probabilities(v, LogitSpec.uniform(0.1))
    assert np.all(p[o] < 1e-300)


def test_vot_ordering_enforced():
    with pytest.raises(ValueError):
        EconomicParams(beta_A=30, beta_P=20)


# --- flat logit -------------------------------------------------------------


def test_logit_symmetric():
    assert np.allclose(logit_probabilities([-3.0, -3.0], 0.7), [0.5, 0.5], atol=0, rtol=1e-15)


def test_logit_calibration_point():
    p = logit_probabilities([0.0, -5.0], 0.5)
    assert p[0] == pytest.approx(1 / (1 + math.exp(-2.5)), abs=1e-15)
    assert abs(p[0] - 0.9241) <= 5e-4


def test_logit_three_choices():
    p = logit_probabilities([0.0, -1.0, -2.0], 1.0)
    assert np.allclose(p, softmax_oracle([0, -1, -2], 1.0), rtol=1e-14)
    assert np.allclose(p, [0.6652, 0.2447, 0.0900], atol=5e-5)


def test_logit_no_overflow():
    p = logit_probabilities([700.0, 699.0, -700.0], 1.0)
    assert np.all(np.isfinite(p))
    assert p.sum() == pytest.approx(1.0, abs=1e-15)


def test_logit_zero_scale_uniform():
    assert np.allclose(logit_probabilities([1.0, 5.0, -3.0], 0.0), 1 / 3)


def test_logit_contract_errors():
    with pytest.raises(ValueError):
        logit_probabilities([], 1.0)
    with pytest.raises(ValueError):
        logit_probabilities([1.0], -0.1)


@given(utils, scales)
def test_logit_normalized(v, mu):
    p = logit_probabilities(v, mu)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all((p >= 0) & (p <= 1))


@given(utils, scales, st.floats(-50, 50))
def test_logit_translation_invariant(v, mu, c):
    p = logit_probabilities(v, mu)
    q = logit_probabilities(np.array(v) + c, mu)
    assert np.allclose(p, q, atol=1e-12, rtol=0)


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.floats(0.05, 2.0),
       st.floats(0.01, 5.0), st.integers(0, 5))
def test_logit_monotone(v, mu, bump, k):
    k %= len(v)
    p = logit_probabilities(v, mu)
    w = list(v)
    w[k] += bump
    q = logit_probabilities(w, mu)
    assert q[k] > p[k] or p[k] == 1.0
    others = [i for i in range(len(v)) if i != k]
    assert np.all(q[others] <= p[others] + 1e-15)


# --- logsum -----------------------------------------------------------------


def test_logsum_examples():
    assert class_logsum([-36.0], 0.1) == pytest.approx(-36.0)
    oracle = 2.0 * math.log(math.exp(-2.5) + math.exp(-5.0))
    assert class_logsum([-5.0, -10.0], 0.5) == pytest.approx(oracle, abs=1e-12)
    assert class_logsum([-7.0, -7.0], 0.4) == pytest.approx(-7.0 + math.log(2) / 0.4)


def test_logsum_rejects_zero_scale():
    with pytest.raises(ValueError):
        class_logsum([1.0, 2.0], 0.0)


def test_logsum_ignores_sentinel_choice():
    base = class_logsum([-5.0, -10.0], 0.5)
    assert class_logsum([-5.0, -10.0, -1e6], 0.5) == pytest.approx(base, abs=1e-9)


@given(utils, scales)
def test_logsum_bounds(v, mu):
    ls = class_logsum(v, mu)
    m = max(v)
    tol = 1e-9 * max(1.0, abs(m))
    assert m - tol <= ls <= m + math.log(len(v)) / mu + tol


# --- logit derivatives ------------------------------------------------------


def test_logit_jacobian_two_equal_choices():
    J = logit_probability_jacobian([1.0, 1.0], 1.0)
    assert np.allclose(J, [[0.25, -0.25], [-0.25, 0.25]])
    assert np.all(logit_probability_jacobian([1.0, 3.0], 0.0) == 0)


def test_logit_jacobian_fd():
    v = np.array([-3.0, -1.2, -4.5, 0.3])
    J = logit_probability_jacobian(v, 0.7)
    h = 1e-6
    for k in range(v.size):
        e = np.zeros_like(v)
        e[k] = h
        col = (logit_probabilities(v + e, 0.7) - logit_probabilities(v - e, 0.7)) / (2 * h)
        assert np.allclose(J[:, k], col, atol=1e-9)


# --- nested logit -----------------------------------------------------------


def nested_oracle(v, mu_r, mu_t, cls):
    """Two-level formula written out term by term, choosing the nest by scale order."""
    by = 0 if mu_r > mu_t else 1
    inner, outer = (mu_r, mu_t) if mu_r > mu_t else (mu_t, mu_r)
    keys = sorted({c[by] for c in cls.choice_set})
    sums = {k: sum(math.exp(inner * v[i]) for i, c in enumerate(cls.choice_set) if c[by] == k)
            for k in keys}
    denom = sum(s ** (outer / inner) for s in sums.values())
    out = []
    for i, c in enumerate(cls.choice_set):
        s = sums[c[by]]
        out.append(math.exp(inner * v[i]) / s * s ** (outer / inner) / denom)
    return np.array(out)


B_FIXTURE = np.array([-18.0, -24.0, -20.5, -21.0, -17.5, -26.0, -23.0])


@pytest.mark.parametrize("mu_r,mu_t", [(1.0, 0.5), (0.5, 1.0), (0.3, 0.1), (0.1, 0.3)])
def test_nested_matches_brute_force(mu_r, mu_t):
    cls = CLASS_BY_LABEL["b"]
    p = nested_logit_probabilities(B_FIXTURE, mu_r, mu_t, cls)
    assert np.allclose(p, nested_oracle(B_FIXTURE, mu_r, mu_t, cls), rtol=1e-12, atol=1e-15)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_nested_reduces_to_flat_for_equal_scales():
    rng = np.random.default_rng(3)
    for cls in CLASSES:
        v = rng.uniform(-40, 0, len(cls.choice_set))
        assert np.max(np.abs(nested_logit_probabilities(v, 0.5, 0.5, cls)
                             - logit_probabilities(v, 0.5))) <= 1e-12


@given(st.floats(0.05, 2.0), st.floats(0.05, 2.0), st.floats(-30, 30), st.floats(-30, 30))
def test_nested_single_choice_nests_collapse(mu_r, mu_t, v0, v1):
    # a' and b' decide only on renting; nesting by travel leaves one nest with
    # both alternatives, nesting by rental leaves two singleton nests
    cls = CLASS_BY_LABEL["a'"]
    p = nested_logit_probabilities([v0, v1], mu_r, mu_t, cls)
    assert np.allclose(p, logit_probabilities([v0, v1], mu_r), atol=1e-12)


def test_nested_logsum_reduces():
    v = B_FIXTURE
    assert nested_logsum(v, 0.4, 0.4, CLASS_BY_LABEL["b"]) == pytest.approx(class_logsum(v, 0.4))


def test_nested_logsum_gradient_is_probability():
    # d logsum / d V_i equals the choice probability, for either nesting
    cls = CLASS_BY_LABEL["b"]
    for mu_r, mu_t in [(0.8, 0.3), (0.3, 0.8)]:
        p = nested_logit_probabilities(B_FIXTURE, mu_r, mu_t, cls)
        h = 1e-6
        for i in range(B_FIXTURE.size):
            e = np.zeros_like(B_FIXTURE)
            e[i] = h
            d = (nested_logsum(B_FIXTURE + e, mu_r, mu_t, cls)
                 - nested_logsum(B_FIXTURE - e, mu_r, mu_t, cls)) / (2 * h)
            assert d == pytest.approx(p[i], abs=1e-8)


def test_nested_jacobian_fd():
    cls = CLASS_BY_LABEL["b"]
    for mu_r, mu_t in [(0.9, 0.4), (0.4, 0.9)]:
        J = nested_probability_jacobian(B_FIXTURE, mu_r, mu_t, cls)
        h = 1e-6
        for k in range(B_FIXTURE.size):
            e = np.zeros_like(B_FIXTURE)
            e[k] = h
            col = (nested_logit_probabilities(B_FIXTURE + e, mu_r, mu_t, cls)
                   - nested_logit_probabilities(B_FIXTURE - e, mu_r, mu_t, cls)) / (2 * h)
            assert np.allclose(J[:, k], col, atol=1e-9)
        assert np.allclose(J.sum(axis=0), 0.0, atol=1e-12)


def test_nested_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        nested_logit_probabilities(B_FIXTURE, 0.0, 0.5, CLASS_BY_LABEL["b"])
    with pytest.raises(ValueError):
        LogitSpec(model="nested", mu_rental=0.0, mu_travel=0.2)


def test_class_probabilities_nested_switch():
    v = np.linspace(-30, -5, N_CHOICES)
    flat = class_probabilities(v, LogitSpec.uniform(0.2))
    nested = class_probabilities(v, LogitSpec(model="nested", mu=0.2, mu_rental=0.2, mu_travel=0.2))
    assert np.allclose(flat, nested, atol=1e-12)
    for sl in CLASS_SLICES:
        assert flat[sl].sum() == pytest.approx(1.0, abs=1e-12)


# --- domain types ------------------------------------------------------------


def test_pricing_decision_roundtrip_and_bounds():
    d = PricingDecision.from_vector([10.0, 3.0, 12.0, 4.0])
    assert d.fares == (10.0, 12.0) and d.payments == (3.0, 4.0)
    assert list(d.to_vector()) == [10.0, 3.0, 12.0, 4.0]
    with pytest.raises(ValueError):
        PricingDecision((1.0,), (-0.5,))


def test_period_spec_validation():
    p = PeriodSpec("x", 4.0, {"n": 10.0})
    assert p.populations["b'"] == 0.0
    with pytest.raises(ValueError):
        PeriodSpec("x", 4.0, {"z": 1.0})
    with pytest.raises(ValueError):
        PeriodSpec("x", 0.0, {})
    with pytest.raises(ValueError):
        PeriodSpec("x", 1.0, {"n": -1.0})


@settings(max_examples=50)
@given(st.floats(0.0, 2.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 5.0),
       st.floats(0.0, 60.0), st.floats(0.0, 60.0), st.floats(0.01, 1.0))
def test_class_probabilities_normalized(t_r, t_p, w_c, n0, fare, pay, mu):
    v = utility_vector(t_r, t_p, w_c, n0, fare, pay, EconomicParams())
    p = class_probabilities(v, LogitSpec.uniform(mu))
    for sl in CLASS_SLICES:
        assert abs(p[sl].sum() - 1.0) <= 1e-12
