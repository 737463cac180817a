from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from ccsocopf import DATA_DIR
from ccsocopf.chance import UncertaintySpec
from ccsocopf.network import WindAddition, apply_modifiers, load_case

FIXTURES = Path(__file__).parent / "fixtures"
CONFIGS = Path(__file__).parents[1] / "configs"

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")

# lines collected by test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


def fixture_case(name, wind=None):
    case = load_case(FIXTURES / f"{name}.m")
    if wind:
        case = apply_modifiers(case, 1.0, [WindAddition(*w) for w in wind])
    return case


@pytest.fixture
def case2():
    return fixture_case("case2")


@pytest.fixture
def case3():
    """Meshed 3-bus case with a 40 MW farm at bus 3 (sd 6 MW)."""
    return fixture_case("case3", [(3, 40.0, 6.0)])


@pytest.fixture
def case3_screen():
    return fixture_case("case3_screen", [(3, 40.0, 6.0)])


@pytest.fixture
def triangle():
    return fixture_case("triangle_lossless")


def case118_setup():
    """Ratings at 70%, 300/600 MW farms at buses 5/64 with 10% sd."""
    base = load_case(DATA_DIR / "case118_cc.m")
    return apply_modifiers(base, 0.7, [WindAddition(5, 300.0, 30.0), WindAddition(64, 600.0, 60.0)])


@pytest.fixture(scope="session")
def case118():
    return case118_setup()


@pytest.fixture(scope="session")
def spec118(case118):
    return UncertaintySpec.from_case(case118, 0.05)


CONFIG_LOSS_WEIGHT = 100.0


@pytest.fixture(scope="session")
def cc118(case118, spec118):
    """CC run on case118 with the config's reactive-loss weight, plus its wall time."""
    import time

    from ccsocopf.driver import solve_cc

    t0 = time.perf_counter()
    rep = solve_cc(case118, spec118, loss_weight=CONFIG_LOSS_WEIGHT)
    return rep, time.perf_counter() - t0


@pytest.fixture(scope="session")
def det118(case118):
    from ccsocopf.powerflow import recover_feasible
    from ccsocopf.socopf import solve_sequential, state_to_seed

    state = solve_sequential(case118, loss_weight=CONFIG_LOSS_WEIGHT)
    return state, recover_feasible(case118, state_to_seed(case118, state))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
