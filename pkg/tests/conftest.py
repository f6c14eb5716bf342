import numpy as np
import pytest

from avcrowd.harness import derive_default_config, market_config
from avcrowd.model import LogitSpec, MarketConfig, CityParams, EconomicParams, PeriodSpec
from avcrowd.scenarios import ScenarioSpec, optimize, second_best_lambda_loop

# puts the default profit floor strictly between the first-best and monopoly profits
RHO = 15.0

# lines collected by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_experiment():
    return derive_default_config()


@pytest.fixture(scope="session")
def default_market(default_experiment):
    return market_config(default_experiment)


@pytest.fixture(scope="session")
def monopoly(default_market):
    return optimize(ScenarioSpec("monopoly"), default_market)


@pytest.fixture(scope="session")
def first_best(default_market):
    return optimize(ScenarioSpec("first_best"), default_market)


@pytest.fixture(scope="session")
def second_best(default_market, monopoly, first_best):
    return second_best_lambda_loop(default_market, RHO, monopoly=monopoly, first_best=first_best)


def small_market(mu=0.1, scale=1.0, Ns=0.0):
    """A single-period market small enough for quick solver tests."""
    pops = {"n": 2000.0 * scale, "r": 800.0 * scale, "a": 60.0 * scale, "a'": 340.0 * scale,
            "b": 60.0 * scale, "b'": 340.0 * scale}
    return MarketConfig(CityParams(congestion_coeff_b=2.67e-12 * 1e4), EconomicParams(prepurchased_Ns=Ns),
                        (PeriodSpec("all", 24.0, pops),), LogitSpec.uniform(mu))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
