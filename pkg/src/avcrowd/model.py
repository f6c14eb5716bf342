"""Domain types, per-class choice sets, utility assembly and logit choice models.

Citizens fall into six classes by vehicle ownership and travel need:

====  ========  ========  ===========
class owns AV   owns MV   travel need
====  ========  ========  ===========
n     no        no        yes
r     no        yes       yes
a     yes       no        yes
a'    yes       no        no
b     yes       yes       yes
b'    yes       yes       no
====  ========  ========  ===========

A choice is a ``(travel_mode, rental)`` pair. Travel modes are ``O`` (on-demand
crowdsourced AV), ``A`` (private AV), ``M`` (manual vehicle), ``P`` (public
transit) and ``-`` (no trip). Rental choices are ``R`` (rent the AV to the
platform), ``N`` (keep it) and ``-`` (owns no AV).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

TRAVEL_MODES = ("O", "A", "M", "P", "-")
RENTAL_CHOICES = ("R", "N", "-")

# Utility assigned to on-demand rides when the platform has no vehicle at all.
NO_SERVICE_UTILITY = -1.0e6


@dataclass(frozen=True)
class CitizenClass:
    label: str
    owns_av: bool
    owns_mv: bool
    has_travel_need: bool
    choice_set: tuple[tuple[str, str], ...]


CLASSES: tuple[CitizenClass, ...] = (
    CitizenClass("n", False, False, True, (("O", "-"), ("P", "-"))),
    CitizenClass("r", False, True, True, (("O", "-"), ("M", "-"), ("P", "-"))),
    CitizenClass(
        "a", True, False, True,
        (("A", "N"), ("O", "N"), ("O", "R"), ("P", "N"), ("P", "R")),
    ),
    CitizenClass("a'", True, False, False, (("-", "N"), ("-", "R"))),
    CitizenClass(
        "b", True, True, True,
        (("A", "N"), ("M", "N"), ("M", "R"), ("O", "N"), ("O", "R"), ("P", "N"), ("P", "R")),
    ),
    CitizenClass("b'", True, True, False, (("-", "N"), ("-", "R"))),
)
CLASS_LABELS: tuple[str, ...] = tuple(c.label for c in CLASSES)
CLASS_BY_LABEL: dict[str, CitizenClass] = {c.label: c for c in CLASSES}


def _flatten_choices():
    labels, modes, rentals, owners = [], [], [], []
    for ci, cls in enumerate(CLASSES):
        for mode, rent in cls.choice_set:
            labels.append((cls.label, mode, rent))
            modes.append(mode)
            rentals.append(rent)
            owners.append(ci)
    return tuple(labels), np.array(owners), tuple(modes), tuple(rentals)


# Global ordering of all 21 (class, travel, rental) alternatives.
CHOICES, CHOICE_CLASS, CHOICE_MODE, CHOICE_RENTAL = _flatten_choices()
N_CHOICES = len(CHOICES)
CLASS_SLICES: tuple[slice, ...] = tuple(
    slice(int(np.flatnonzero(CHOICE_CLASS == ci)[0]), int(np.flatnonzero(CHOICE_CLASS == ci)[-1]) + 1)
    for ci in range(len(CLASSES))
)


def choice_mask(mode: str | None = None, rental: str | None = None) -> np.ndarray:
    """Boolean mask over the global choice vector selecting a mode and/or rental."""
    m = np.ones(N_CHOICES, dtype=bool)
    if mode is not None:
        m &= np.array([c == mode for c in CHOICE_MODE])
    if rental is not None:
        m &= np.array([c == rental for c in CHOICE_RENTAL])
    return m


def choice_name(index: int) -> str:
    label, mode, rent = CHOICES[index]
    return f"{label}({mode},{rent})"


@dataclass(frozen=True)
class CityParams:
    """Geometry, congestion and matching constants of the city.

    ``area_R`` and ``free_flow_speed_v0`` only enter through ``theta`` and the
    quadratic congestion coefficients; they are kept for reference.
    """

    area_R: float = 400.0
    free_flow_speed_v0: float = 40.0
    grid_constant_k: float = 0.63
    trip_factor_kappa: float = 1.0
    congestion_base_a: float = 0.5
    congestion_coeff_b: float = 2.67e-12
    av_occupation_alpha: float = 0.7
    matching_A: float = 1.5
    matching_alpha1: float = 0.7
    matching_alpha2: float = 0.7
    epsilon_wait: float = 1e-3
    epsilon_idle_fleet: float = 1.0

    @property
    def theta(self) -> float:
        return self.grid_constant_k / self.trip_factor_kappa

    def __post_init__(self):
        for name in ("area_R", "free_flow_speed_v0", "grid_constant_k", "trip_factor_kappa",
                     "congestion_base_a", "congestion_coeff_b", "matching_A", "matching_alpha1",
                     "matching_alpha2", "epsilon_wait", "epsilon_idle_fleet"):
            if not getattr(self, name) > 0:
                raise ValueError(f"CityParams.{name} must be positive")
        if not 0 < self.av_occupation_alpha < 1:
            raise ValueError("CityParams.av_occupation_alpha must lie in (0, 1)")


@dataclass(frozen=True)
class EconomicParams:
    beta_A: float = 20.0
    beta_P: float = 30.0
    beta_M: float = 40.0
    gamma: float = 30.0
    transit_time_tn: float = 1.0
    transit_fare_Fn: float = 6.0
    sharing_cost_m: float = 20.0
    purchase_amortized_g: float = 100000.0 / (10 * 365)
    maintenance_amortized_z: float = 5000.0 / 365
    fixed_cost_Cf: float = 6.0e5
    prepurchased_Ns: float = 0.0
    profit_floor_rate_rho: float = 0.0
    # Optional per-trip monetary cost of private modes; zero in the base model.
    private_av_cost: float = 0.0
    private_mv_cost: float = 0.0

    def __post_init__(self):
        if not self.beta_A < self.beta_P < self.beta_M:
            raise ValueError("value of time must satisfy beta_A < beta_P < beta_M")
        for name in ("gamma", "transit_time_tn", "transit_fare_Fn", "sharing_cost_m",
                     "purchase_amortized_g", "maintenance_amortized_z", "fixed_cost_Cf",
                     "prepurchased_Ns", "profit_floor_rate_rho"):
            if getattr(self, name) < 0:
                raise ValueError(f"EconomicParams.{name} must be nonnegative")

    @property
    def fleet_daily_cost(self) -> float:
        return self.prepurchased_Ns * (self.purchase_amortized_g + self.maintenance_amortized_z)

    @property
    def profit_floor(self) -> float:
        return self.profit_floor_rate_rho * (self.fleet_daily_cost + self.fixed_cost_Cf)


@dataclass(frozen=True)
class PeriodSpec:
    """A homogeneous period of the day.

    ``populations`` maps class label to the number of persons making a choice
    within one decision window of length ``decision_window_h``.
    """

    name: str
    duration_Hk: float
    populations: Mapping[str, float]
    decision_window_h: float = 1.0

    def __post_init__(self):
        if self.duration_Hk <= 0 or self.decision_window_h <= 0:
            raise ValueError("period durations must be positive")
        unknown = set(self.populations) - set(CLASS_LABELS)
        if unknown:
            raise ValueError(f"unknown citizen classes: {sorted(unknown)}")
        if any(v < 0 for v in self.populations.values()):
            raise ValueError("class populations must be nonnegative")
        object.__setattr__(self, "populations",
                           {c: float(self.populations.get(c, 0.0)) for c in CLASS_LABELS})

    def population_vector(self) -> np.ndarray:
        return np.array([self.populations[c] for c in CLASS_LABELS], dtype=float)


@dataclass(frozen=True)
class LogitSpec:
    """Choice model scales per class.

    ``model="flat"`` uses ``mu``; ``model="nested"`` uses ``mu_rental`` and
    ``mu_travel`` (equal scales reduce to the flat model).
    """

    model: str = "flat"
    mu: Mapping[str, float] = field(default_factory=lambda: dict.fromkeys(CLASS_LABELS, 0.1))
    mu_rental: Mapping[str, float] = field(default_factory=lambda: dict.fromkeys(CLASS_LABELS, 0.1))
    mu_travel: Mapping[str, float] = field(default_factory=lambda: dict.fromkeys(CLASS_LABELS, 0.1))

    def __post_init__(self):
        if self.model not in ("flat", "nested"):
            raise ValueError(f"unknown logit model {self.model!r}")
        for name in ("mu", "mu_rental", "mu_travel"):
            val = getattr(self, name)
            if isinstance(val, (int, float)):
                val = dict.fromkeys(CLASS_LABELS, float(val))
            val = {c: float(val[c]) for c in CLASS_LABELS}
            if any(v < 0 for v in val.values()):
                raise ValueError(f"LogitSpec.{name} must be nonnegative")
            object.__setattr__(self, name, val)
        if self.model == "nested" and any(
            self.mu_rental[c] <= 0 or self.mu_travel[c] <= 0 for c in CLASS_LABELS
        ):
            raise ValueError("nested logit scales must be positive")

    @classmethod
    def uniform(cls, mu: float) -> "LogitSpec":
        return cls(model="flat", mu=mu, mu_rental=mu, mu_travel=mu)


@dataclass(frozen=True)
class MarketConfig:
    city: CityParams
    econ: EconomicParams
    periods: tuple[PeriodSpec, ...]
    logit: LogitSpec = field(default_factory=LogitSpec)

    def __post_init__(self):
        object.__setattr__(self, "periods", tuple(self.periods))
        if not self.periods:
            raise ValueError("at least one period is required")

    @property
    def n_periods(self) -> int:
        return len(self.periods)

    def service_available(self, period: PeriodSpec) -> bool:
        """False when the platform can never field a vehicle in this period."""
        owners = sum(period.populations[c] for c in ("a", "a'", "b", "b'"))
        return self.econ.prepurchased_Ns > 0 or owners > 0


@dataclass(frozen=True)
class PricingDecision:
    """Per-period on-demand fare ($/trip) and owner payment ($/ride)."""

    fares: tuple[float, ...]
    payments: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "fares", tuple(float(f) for f in self.fares))
        object.__setattr__(self, "payments", tuple(float(p) for p in self.payments))
        if len(self.fares) != len(self.payments):
            raise ValueError("fares and payments must have one entry per period")
        if any(v < 0 for v in self.fares + self.payments):
            raise ValueError("fares and payments must be nonnegative")

    @classmethod
    def from_vector(cls, x: Sequence[float]) -> "PricingDecision":
        """Build from the interleaved vector ``(F_1, p_1, F_2, p_2, ...)``."""
        x = np.asarray(x, dtype=float)
        return cls(tuple(x[0::2]), tuple(x[1::2]))

    def to_vector(self) -> np.ndarray:
        out = np.empty(2 * len(self.fares))
        out[0::2] = self.fares
        out[1::2] = self.payments
        return out

    def __len__(self):
        return len(self.fares)


# ---------------------------------------------------------------------------
# utilities


def travel_utility(mode: str, fare: float, t_r: float, t_p: float, w_c: float,
                   econ: EconomicParams, service: bool = True) -> float:
    if mode == "O":
        if not service:
            return NO_SERVICE_UTILITY
        return -fare - econ.beta_A * t_r - econ.gamma * (w_c + t_p)
    if mode == "A":
        return -econ.beta_A * t_r - econ.private_av_cost
    if mode == "M":
        return -econ.beta_M * t_r - econ.private_mv_cost
    if mode == "P":
        return -econ.transit_fare_Fn - econ.beta_P * econ.transit_time_tn
    if mode == "-":
        return 0.0
    raise ValueError(f"unknown travel mode {mode!r}")


def rental_utility(rental: str, payment: float, n0: float, econ: EconomicParams) -> float:
    if rental == "R":
        return payment * n0 - econ.sharing_cost_m
    if rental in ("N", "-"):
        return 0.0
    raise ValueError(f"unknown rental choice {rental!r}")


def assemble_utilities(cls: CitizenClass, t_r: float, t_p: float, w_c: float, n0: float,
                       fare: float, payment: float, econ: EconomicParams,
                       service: bool = True) -> dict[tuple[str, str], float]:
    """Utility in $ of each admissible (travel, rental) pair of ``cls``."""
    return {
        (i, j): travel_utility(i, fare, t_r, t_p, w_c, econ, service)
        + rental_utility(j, payment, n0, econ)
        for i, j in cls.choice_set
    }


def utility_vector(t_r, t_p, w_c, n0, fare, payment, econ, service=True) -> np.ndarray:
    """Utilities of all 21 alternatives in global choice order."""
    travel = {m: travel_utility(m, fare, t_r, t_p, w_c, econ, service) for m in TRAVEL_MODES}
    rent = {j: rental_utility(j, payment, n0, econ) for j in RENTAL_CHOICES}
    return np.array([travel[m] + rent[j] for m, j in zip(CHOICE_MODE, CHOICE_RENTAL)])


# ---------------------------------------------------------------------------
# logit models


def logit_probabilities(utilities: Sequence[float], mu: float) -> np.ndarray:
    """Multinomial logit shares, overflow-safe. ``mu = 0`` gives uniform shares."""
    v = np.asarray(utilities, dtype=float)
    if v.size == 0:
        raise ValueError("empty choice set")
    if mu < 0:
        raise ValueError("logit scale must be nonnegative")
    z = mu * v
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def class_logsum(utilities: Sequence[float], mu: float) -> float:
    """Expected maximum utility ``(1/mu) ln sum exp(mu V)``."""
    v = np.asarray(utilities, dtype=float)
    if v.size == 0:
        raise ValueError("empty choice set")
    if not mu > 0:
        raise ValueError("logsum is undefined for mu <= 0")
    vmax = v.max()
    return float(vmax + np.log(np.exp(mu * (v - vmax)).sum()) / mu)


def _nests(cls: CitizenClass, outer: str):
    """Group choice indices (local to the class) by travel mode or by rental."""
    pos = 0 if outer == "travel" else 1
    groups: dict[str, list[int]] = {}
    for idx, choice in enumerate(cls.choice_set):
        groups.setdefault(choice[pos], []).append(idx)
    return list(groups.values())


def _nested_parts(utilities, mu_r, mu_t, cls):
    """Scales and nests: (inner scale, outer scale, nests)."""
    if mu_r <= 0 or mu_t <= 0:
        raise ValueError("nested logit scales must be positive")
    if mu_r > mu_t:
        # travel mode chosen first, rental decided inside each travel nest
        return mu_r, mu_t, _nests(cls, "travel")
    return mu_t, mu_r, _nests(cls, "rental")


def nested_logit_probabilities(utilities: Sequence[float], mu_r: float, mu_t: float,
                               cls: CitizenClass) -> np.ndarray:
    """Two-level nested logit shares over ``cls.choice_set``.

    The alternative with the larger scale sits in the lower nest. With equal
    scales the result is the flat logit with that scale.
    """
    v = np.asarray(utilities, dtype=float)
    if v.size != len(cls.choice_set):
        raise ValueError("utilities do not match the class choice set")
    if mu_r == mu_t:
        if mu_r <= 0:
            raise ValueError("nested logit scales must be positive")
        return logit_probabilities(v, mu_r)
    inner, outer, nests = _nested_parts(v, mu_r, mu_t, cls)
    ratio = outer / inner
    shift = v.max()
    probs = np.empty_like(v)
    log_sums = np.empty(len(nests))
    for k, members in enumerate(nests):
        z = inner * (v[members] - shift)
        zmax = z.max()
        e = np.exp(z - zmax)
        probs[members] = e / e.sum()
        log_sums[k] = zmax + np.log(e.sum())
    upper = logit_probabilities(log_sums, ratio)
    for k, members in enumerate(nests):
        probs[members] *= upper[k]
    return probs


def nested_logsum(utilities: Sequence[float], mu_r: float, mu_t: float,
                  cls: CitizenClass) -> float:
    """Expected maximum utility of the nested model, in $."""
    v = np.asarray(utilities, dtype=float)
    if mu_r == mu_t:
        return class_logsum(v, mu_r)
    inner, outer, nests = _nested_parts(v, mu_r, mu_t, cls)
    inclusive = np.array([class_logsum(v[m], inner) for m in nests])
    return class_logsum(inclusive, outer)


def nested_probability_jacobian(utilities, mu_r, mu_t, cls) -> np.ndarray:
    """d pi_i / d V_j for one class under the nested model."""
    v = np.asarray(utilities, dtype=float)
    if mu_r == mu_t:
        return logit_probability_jacobian(v, mu_r)
    pi = nested_logit_probabilities(v, mu_r, mu_t, cls)
    inner, outer, nests = _nested_parts(v, mu_r, mu_t, cls)
    n = v.size
    # d ln pi_i / d V_j = inner*[i==j] + (outer - inner)*[same nest]*P(j|nest) - outer*pi_j
    dlog = -outer * np.tile(pi, (n, 1))
    dlog[np.diag_indices(n)] += inner
    for members in nests:
        cond = pi[members] / pi[members].sum()
        for i in members:
            dlog[i, members] += (outer - inner) * cond
    return pi[:, None] * dlog


def logit_probability_jacobian(utilities, mu) -> np.ndarray:
    """d pi_i / d V_j of the flat logit: ``mu * (diag(pi) - pi pi^T)``."""
    pi = logit_probabilities(utilities, mu)
    return mu * (np.diag(pi) - np.outer(pi, pi))


def class_probabilities(v: np.ndarray, logit: LogitSpec) -> np.ndarray:
    """Choice shares of all 21 alternatives, class by class."""
    out = np.empty(N_CHOICES)
    for cls, sl in zip(CLASSES, CLASS_SLICES):
        if logit.model == "nested":
            out[sl] = nested_logit_probabilities(
                v[sl], logit.mu_rental[cls.label], logit.mu_travel[cls.label], cls)
        else:
            out[sl] = logit_probabilities(v[sl], logit.mu[cls.label])
    return out


def class_logsums(v: np.ndarray, logit: LogitSpec) -> np.ndarray:
    out = np.empty(len(CLASSES))
    for k, (cls, sl) in enumerate(zip(CLASSES, CLASS_SLICES)):
        if logit.model == "nested":
            out[k] = nested_logsum(v[sl], logit.mu_rental[cls.label], logit.mu_travel[cls.label], cls)
        else:
            out[k] = class_logsum(v[sl], logit.mu[cls.label])
    return out


def probability_jacobian_blocks(v: np.ndarray, logit: LogitSpec) -> list[np.ndarray]:
    blocks = []
    for cls, sl in zip(CLASSES, CLASS_SLICES):
        if logit.model == "nested":
            blocks.append(nested_probability_jacobian(
                v[sl], logit.mu_rental[cls.label], logit.mu_travel[cls.label], cls))
        else:
            blocks.append(logit_probability_jacobian(v[sl], logit.mu[cls.label]))
    return blocks
