import numpy as np
import pytest

from powmfg.equilibrium import (
    EquilibriumConfig,
    _steady_pass,
    active_fraction,
    adaptive_inertia,
    inertia_update,
    initial_alpha_bar,
    mean_hashrate,
    solve_steady_state,
    solve_transient,
    steady_coefficients,
    transient_coefficients,
)
from powmfg.errors import ConfigError, ConvergenceError, DomainError
from powmfg.fokker_planck import DensityState, initial_density
from powmfg.grid import Grid2D, ScalarField, integrate
from powmfg.hjb import optimal_control
from powmfg.market import MarketParams, node_count
from powmfg.protocol import ProtocolParams, initial_hash_target


def two_cell():
    g = Grid2D(3, 3, 1.0, 1.0)
    P = np.zeros(g.shape)
    P[1, 1], P[2, 1] = 0.25, 0.75
    a = np.zeros(g.shape)
    a[1, 1], a[2, 1] = 10.0, 20.0
    return g, DensityState.from_masses(g, P), ScalarField(g, a)


def test_mean_hashrate_examples():
    g, m, a = two_cell()
    assert mean_hashrate(a, m) == pytest.approx(17.5)
    const = ScalarField(g, np.full(g.shape, 4.0))
    assert mean_hashrate(const, m) == pytest.approx(4.0)
    P = np.zeros(g.shape)
    P[0] = 1.0 / 3
    assert mean_hashrate(const, DensityState.from_masses(g, P)) == 0.0
    assert active_fraction(a, m) == pytest.approx(1.0)


def test_mean_hashrate_grid_mismatch():
    g, m, a = two_cell()
    with pytest.raises(DomainError):
        mean_hashrate(ScalarField.zeros(Grid2D(4, 3)), m)


def test_inertia_update():
    assert inertia_update(10.0, 20.0, 0.0) == 20.0
    assert inertia_update(10.0, 20.0, 0.5) == 15.0
    assert inertia_update(10.0, 20.0, 1 - 1e-12) == pytest.approx(10.0)
    assert np.allclose(inertia_update(np.array([1.0, 2.0]), np.array([3.0, 6.0]), 0.5), [2.0, 4.0])
    for w in (-0.1, 1.0):
        with pytest.raises(DomainError):
            inertia_update(1.0, 2.0, w)


def test_adaptive_inertia():
    old = np.zeros(4)
    assert adaptive_inertia(old, np.ones(4)) == pytest.approx(0.95)
    assert adaptive_inertia(old, np.array([0.0, 0.0, 0.0, 2.0])) == pytest.approx(0.5)
    assert adaptive_inertia(old, old) == 0.0


@pytest.mark.parametrize(
    "kw",
    [{"horizon": 0.0}, {"n_time_steps": 1}, {"fp_tol": 0.0}, {"inertia": 1.0}, {"intensity_mode": "x"}, {"initial_alpha_bar": -1.0}, {"initial_alpha_bar": "guess"}],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        EquilibriumConfig(**kw)


def test_time_grid():
    cfg = EquilibriumConfig(horizon=10.0, n_time_steps=11)
    assert cfg.dt == 1.0
    assert np.array_equal(cfg.times(), np.linspace(0, 10, 11))


def test_initial_alpha_bar_rules():
    pp, mp = ProtocolParams(), MarketParams()
    assert initial_alpha_bar(EquilibriumConfig(), pp, mp) == pytest.approx(mp.static_maximizer)
    assert initial_alpha_bar(EquilibriumConfig(initial_alpha_bar=5.0), pp, mp) == 5.0
    cfg = EquilibriumConfig(initial_alpha_bar="protocol")
    M = node_count(cfg.horizon, mp)
    assert initial_alpha_bar(cfg, pp, mp) == pytest.approx(max(initial_hash_target(M) / M, cfg.alpha_floor))


def test_coefficients():
    pp, mp = ProtocolParams(), MarketParams()
    cfg = EquilibriumConfig()
    co = steady_coefficients(1e15, cfg, pp, mp)
    assert co.lambda_t == 2016.0
    assert co.k_t == pp.fee_floor
    assert co.supply == pp.supply_limit
    assert co.h_t == pytest.approx(node_count(cfg.horizon, mp) * 1e15)
    tc = transient_coefficients(0.0, 1e15, 1e15, cfg, pp, mp)
    assert tc.n_nodes == 1.0 and tc.k_t == 50.0
    frozen = transient_coefficients(0.0, 1e15, 1e15, EquilibriumConfig(frozen_coefficients=True), pp, mp)
    assert frozen.n_nodes == co.n_nodes and frozen.k_t == co.k_t


def test_degenerate_market_is_floored():
    mp = MarketParams(theta1=1e-9)
    assert mp.static_maximizer <= 0
    g = Grid2D(12, 12)
    cfg = EquilibriumConfig(n_time_steps=4)
    st = solve_steady_state(cfg, ProtocolParams(), mp, g)
    assert st.alpha_bar == cfg.alpha_floor
    assert np.all(st.alpha.values == 0.0)
    assert st.diagnostics["floor_events"] >= 1


@pytest.fixture(scope="module")
def toy_setup():
    mp = MarketParams(theta1=1.0, theta2=1.0, theta3=0.0, unit_cost=0.05, sigma=2.0, discount=0.01, beta=1.5, node_growth_a=1e6, node_growth_b=0.0)
    pp = ProtocolParams(base_reward=0.02)
    g = Grid2D(30, 30, 1.0, 1.0)
    cfg = EquilibriumConfig(horizon=20.0, n_time_steps=11, store_every=2)
    m0 = initial_density(g)
    steady = solve_steady_state(cfg, pp, mp, g, m0)
    return mp, pp, g, cfg, m0, steady


def test_steady_certificate(toy_setup):
    mp, pp, g, cfg, m0, steady = toy_setup
    d = steady.diagnostics
    assert d["converged"] and d["residual_history"][-1] < cfg.fixed_point_tol
    for key in ("hjb_residual", "fp_residual", "fp_renorm_max_deviation"):
        assert np.isfinite(d[key])
    *_, cand, _, _ = _steady_pass(steady.alpha_bar, cfg, pp, mp, g, m0, steady.v)
    assert abs(max(cand, cfg.alpha_floor) - steady.alpha_bar) / steady.alpha_bar < 10 * cfg.fixed_point_tol
    assert steady.m.total_mass() == pytest.approx(1.0, abs=1e-10)


def test_start_at_fixed_point(toy_setup):
    mp, pp, g, cfg, m0, steady = toy_setup
    frozen = EquilibriumConfig(
        horizon=cfg.horizon, n_time_steps=cfg.n_time_steps, frozen_coefficients=True, initial_alpha_bar="steady"
    )
    sol = solve_transient(frozen, steady.m, steady, pp, mp, g)
    assert sol.diagnostics["outer_iterations"] == 1
    assert np.allclose(sol.alpha_bar_path, steady.alpha_bar, rtol=1e-6)


def test_transient_invariants(toy_setup):
    mp, pp, g, cfg, m0, steady = toy_setup
    sol = solve_transient(cfg, m0, steady, pp, mp, g)
    d = sol.diagnostics
    assert d["converged"] and np.all(np.isfinite(d["residual_history"]))
    assert np.all(sol.alpha_bar_path > 0)
    assert sol.slice_indices == [0, 2, 4, 6, 8, 10]
    for i, m, a in zip(sol.slice_indices, sol.m_path, sol.alpha_path):
        assert integrate(m.interior) + m.eta.sum() * g.db == pytest.approx(1.0, abs=1e-8)
        assert max(mean_hashrate(a, m), cfg.alpha_floor) == pytest.approx(sol.alpha_bar_path[i], rel=1e-12)
    # the last control comes straight from the stationary value function
    assert d["terminal_value_gap"] == 0.0
    assert np.array_equal(sol.alpha_path[-1].values, optimal_control(sol.v_inf, _last_params(sol, mp, cfg)).values)
    assert sol.wealth_marginals.shape == (cfg.n_time_steps, g.nx)
    table = sol.coefficient_table()
    assert set(table) == {"t", "n_nodes", "lambda", "k", "supply", "h", "b_hat"}


def _last_params(sol, mp, cfg):
    from powmfg.equilibrium import hjb_params

    return hjb_params(sol.coefficients[-1], mp, cfg.dt, cfg.hjb_tol, cfg.hjb_max_iter)


def test_transient_nonconvergence_reports_history(toy_setup):
    mp, pp, g, cfg, m0, steady = toy_setup
    tight = EquilibriumConfig(horizon=cfg.horizon, n_time_steps=cfg.n_time_steps, max_outer_iter=1, fixed_point_tol=1e-15)
    with pytest.raises(ConvergenceError) as err:
        solve_transient(tight, m0, steady, pp, mp, g)
    assert len(err.value.history) == 1


def test_transient_rejects_bad_mass(toy_setup):
    mp, pp, g, cfg, m0, steady = toy_setup
    bad = DensityState.from_masses(g, 2 * m0.masses())
    with pytest.raises(DomainError):
        solve_transient(cfg, bad, steady, pp, mp, g)


def test_desk_run_diagnostics(desk_run):
    sol = desk_run["sol"]
    d = sol.diagnostics
    assert d["max_mass_error"] < 1e-8
    assert d["dt"] == desk_run["cfg"].dt
    assert len(d["inertia_weights"]) == d["outer_iterations"] - 1
