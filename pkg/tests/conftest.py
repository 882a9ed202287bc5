import os

import numpy as np
import pytest
from hypothesis import settings

from powmfg.grid import Grid2D, ScalarField
from powmfg.hjb import HjbParams
from powmfg.market import MarketParams

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(params=["numba", "numpy"])
def backend(request, monkeypatch):
    if request.param == "numpy":
        monkeypatch.setenv("MFG_DISABLE_NUMBA", "1")
    else:
        monkeypatch.delenv("MFG_DISABLE_NUMBA", raising=False)
    return request.param


@pytest.fixture
def toy_market():
    return MarketParams(theta1=1.0, theta2=0.5, theta3=0.0, unit_cost=0.3, sigma=0.8, discount=0.1)


@pytest.fixture
def toy_params(toy_market):
    return HjbParams(lambda_t=2.0, k_t=1.3, h_t=4.0, b_hat=2.2, market=toy_market, dt=0.05)


def random_alpha(g: Grid2D, seed: int = 0, high: float = 2.0) -> ScalarField:
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.0, high, g.shape)
    a[0] = 0.0
    return ScalarField(g, a)


@pytest.fixture(scope="session")
def desk_run():
    """Steady state and transient equilibrium at 50x50 with default market and protocol values."""
    from powmfg.equilibrium import EquilibriumConfig, solve_steady_state, solve_transient
    from powmfg.fokker_planck import initial_density
    from powmfg.protocol import ProtocolParams

    g = Grid2D(50, 50)
    cfg = EquilibriumConfig(n_time_steps=64)
    pp, mp = ProtocolParams(), MarketParams()
    m0 = initial_density(g)
    steady = solve_steady_state(cfg, pp, mp, g, m0)
    sol = solve_transient(cfg, m0, steady, pp, mp, g)
    return {"grid": g, "cfg": cfg, "pp": pp, "mp": mp, "m0": m0, "steady": steady, "sol": sol}
