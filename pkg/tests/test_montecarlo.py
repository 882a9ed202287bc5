import math

import numpy as np
import pytest

from powmfg.errors import DomainError, ThinningError
from powmfg.fokker_planck import DensityState, initial_density
from powmfg.grid import Grid2D, ScalarField
from powmfg.market import MarketParams
from powmfg.montecarlo import (
    BLOCK,
    PathPoint,
    SimConfig,
    Snapshot,
    density_distance,
    empirical_density,
    simulate_agents,
    write_snapshot_csv,
)

G = Grid2D(40, 20, 1.0, 1.0)


def const_policy(value):
    a = np.full(G.shape, value)
    a[0] = 0.0
    return ScalarField(G, a)


def start(n, x0=5.0, b0=3.0):
    return np.full(n, x0), np.full(n, b0), np.ones(n, dtype=bool)


def test_config_validation():
    for kw in ({"n_agents": 0, "dt": 1, "T": 1}, {"n_agents": 1, "dt": 0, "T": 1}, {"n_agents": 1, "dt": 1, "T": 1, "seed": -1}):
        with pytest.raises(DomainError):
            SimConfig(**kw)
    assert SimConfig(1, 0.25, 10.0).n_steps == 40


def test_exponential_growth_without_control(backend):
    r, T, dt = 0.05, 10.0, 0.01
    mp = MarketParams(theta1=1.0, theta2=1.0, unit_cost=0.1, sigma=0.0, discount=r)
    cfg = SimConfig(50, dt, T, policy=const_policy(0.0))
    res = simulate_agents(cfg, mp, PathPoint(1.0, 1.0, 1.0, 3.0), G, initial=start(50, x0=2.0))
    x = res.snapshots[-1].wealth
    assert res.jumps == 0
    assert np.allclose(x, 2.0 * math.exp(r * T), rtol=r * r * T * dt)


def test_jump_count_is_poisson(backend):
    mp = MarketParams(theta1=1.0, theta2=1.0, unit_cost=0.0, sigma=0.0, discount=0.0)
    n, T, dt, A = 3000, 20.0, 0.05, 0.5
    pt = PathPoint(0.2, 0.0, 1.0, 3.0)
    cfg = SimConfig(n, dt, T, seed=4, policy=const_policy(A))
    res = simulate_agents(cfg, mp, pt, G, initial=start(n))
    mean = n * pt.lam_h * A * T
    assert abs(res.jumps - mean) < 3 * math.sqrt(mean)


def test_inactive_agents_stay_at_zero():
    mp = MarketParams(theta1=1.0, theta2=1.0, unit_cost=1.0, sigma=0.1, discount=0.0)
    # flat spend including row 0, so wealth falls linearly and hits zero
    cfg = SimConfig(100, 0.5, 10.0, policy=ScalarField(G, np.ones(G.shape)))
    res = simulate_agents(cfg, mp, PathPoint(0.01, 0.0, 1.0, 3.0), G, initial=start(100, x0=2.0), snapshot_times=[5.0, 10.0])
    for s in res.snapshots:
        assert np.all(s.wealth[~s.active] == 0.0)
        assert np.all((s.price >= 0) & (s.price <= G.b_max))
    assert not res.snapshots[-1].active.any()


def test_thinning_error():
    mp = MarketParams(theta1=1.0, theta2=1.0, unit_cost=0.0, sigma=0.0, discount=0.0)
    cfg = SimConfig(10, 1.0, 5.0, policy=const_policy(1.0))
    with pytest.raises(ThinningError):
        simulate_agents(cfg, mp, PathPoint(1.0, 0.0, 1.0, 1.0), G, initial=start(10))


def test_needs_initial_state():
    with pytest.raises(DomainError):
        simulate_agents(SimConfig(1, 1.0, 1.0), MarketParams(), PathPoint(1, 1, 1, 1), G)


def _run(seed, threads, n=3 * BLOCK + 17):
    mp = MarketParams(theta1=1.0, theta2=1.0, unit_cost=0.05, sigma=2.0, discount=0.01)
    m0 = DensityState.from_masses(G, np.ones(G.shape) / G.nx / G.ny)
    cfg = SimConfig(n, 0.1, 5.0, seed=seed, policy=const_policy(0.5), threads=threads)
    return simulate_agents(cfg, mp, PathPoint(0.1, 1.0, 1.0, 10.0), G, m0=m0, snapshot_times=[0.0, 2.5, 5.0])


def test_seed_determinism_and_thread_independence():
    a, b, c = _run(3, 1), _run(3, 4), _run(4, 1)
    for s1, s2 in zip(a.snapshots, b.snapshots):
        assert np.array_equal(s1.wealth, s2.wealth) and np.array_equal(s1.price, s2.price)
    assert a.jumps == b.jumps
    assert not np.array_equal(a.snapshots[-1].wealth, c.snapshots[-1].wealth)
    assert [s.t for s in a.snapshots] == [0.0, 2.5, 5.0]


def test_initial_sampling_follows_density():
    res = _run(0, 1, n=20000)
    emp = empirical_density(res.snapshots[0], G)
    assert density_distance(emp, DensityState.from_masses(G, np.ones(G.shape) / G.nx / G.ny)) < 0.1


def test_policy_schedule():
    mp = MarketParams(theta1=1.0, theta2=1.0, unit_cost=0.0, sigma=0.0, discount=0.0)
    sched = [(0.0, const_policy(0.0)), (5.0, const_policy(0.5))]
    cfg = SimConfig(2000, 0.1, 10.0, seed=1, policy=sched)
    res = simulate_agents(cfg, mp, PathPoint(0.1, 0.0, 1.0, 3.0), G, initial=start(2000))
    mean = 2000 * 0.1 * 0.5 * 5.0
    assert abs(res.jumps - mean) < 4 * math.sqrt(mean)


def test_distance_examples():
    g = Grid2D(3, 3, 1.0, 1.0)
    P1 = np.zeros(g.shape)
    P1[1, 1] = P1[2, 1] = 0.5
    P2 = np.zeros(g.shape)
    P2[1, 1] = 1.0
    a, b = DensityState.from_masses(g, P1), DensityState.from_masses(g, P2)
    assert density_distance(a, b) == pytest.approx(0.5)
    assert density_distance(a, a) == 0.0
    with pytest.raises(DomainError):
        density_distance(a, initial_density(Grid2D(4, 4)))


def test_empirical_density_bins():
    g = Grid2D(5, 4, 1.0, 1.0)
    snap = Snapshot(0.0, np.array([0.0, 1.2, 1.4, 9.0]), np.array([0.4, 2.6, 2.4, 1.0]), np.array([False, True, True, True]))
    P = empirical_density(snap, g).masses()
    assert P[0, 0] == 0.25 and P[1, 3] == 0.25 and P[1, 2] == 0.25 and P[4, 1] == 0.25
    assert len(snap.agents()) == 4


def test_snapshot_csv(tmp_path):
    snap = _run(1, 1, n=10).snapshots[-1]
    write_snapshot_csv(tmp_path / "s.csv", snap)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert len(lines) == 11 and lines[0].startswith("t [fortnight]")
