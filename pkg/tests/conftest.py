import warnings

import pytest
from hypothesis import HealthCheck, settings

from penlab import MarketModel, SolverConfig, build_grid, price, put
from penlab.model import JumpSpec

settings.register_profile("penlab", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("penlab")


@pytest.fixture(autouse=True)
def _quiet_grid_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="N adjusted")
        yield


@pytest.fixture(scope="session")
def bs_model():
    return MarketModel(sigma=0.4, r=0.05)


@pytest.fixture(scope="session")
def lognormal_model():
    return MarketModel(sigma=0.4, r=0.05, lam=0.5,
                       jump_density=JumpSpec(kind="lognormal", mu_J=-0.02, sigma_J=0.2))


@pytest.fixture(scope="session")
def small_put_grid():
    return build_grid(put(100.0), N=199, M=200, S_max=200.0)


@pytest.fixture(scope="session")
def small_put_lcp(bs_model, small_put_grid):
    return price(bs_model, put(100.0), small_put_grid, SolverConfig.lcp(psor_tol=1e-12))


# --------------------------------------------------------------------------- #
#  Acceptance report: one line per criterion in the terminal summary
# --------------------------------------------------------------------------- #

ACCEPTANCE_LINES = {}


@pytest.fixture
def record():
    """record(number, title, passed, detail) stores the verdict line of one criterion."""

    def _record(number: int, title: str, passed: bool, detail: str):
        ACCEPTANCE_LINES[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {title}: {detail}"
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
