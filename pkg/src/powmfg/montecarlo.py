"""Agent-based simulation of the wealth/price jump-diffusion, used to cross-check the density solver.

Agents are processed in fixed blocks of ``BLOCK`` agents. Block ``k`` draws
all of its randomness from ``Philox(SeedSequence(seed, spawn_key=(k,)))``,
so results do not depend on how blocks are scheduled over threads.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from . import kernels
from .errors import DomainError, ThinningError
from .fokker_planck import DensityState
from .grid import Grid2D, ScalarField
from .market import MarketParams

BLOCK = 1024
THINNING_LIMIT = 0.1

Policy = Union[ScalarField, str, Sequence]


@dataclass(frozen=True)
class AgentState:
    wealth: float
    price: float
    active: bool


@dataclass(frozen=True)
class PathPoint:
    """Coefficients seen by the agents over one step: (lambda, k, h, b_hat)."""

    lambda_t: float
    k_t: float
    h_t: float
    b_hat: float

    @property
    def lam_h(self) -> float:
        return self.lambda_t / self.h_t


@dataclass
class SimConfig:
    n_agents: int
    dt: float
    T: float
    seed: int = 0
    # a ScalarField, "static" for the unconstrained maximiser, or a list of
    # (t_start, ScalarField) pairs applied piecewise constant in time
    policy: Policy = "static"
    threads: int = 1

    def __post_init__(self):
        if self.n_agents < 1:
            raise DomainError("n_agents must be at least 1")
        if not (self.dt > 0 and self.T > 0):
            raise DomainError("dt and T must be positive")
        if self.seed < 0:
            raise DomainError("seed must be nonnegative")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


@dataclass
class Snapshot:
    t: float
    wealth: np.ndarray
    price: np.ndarray
    active: np.ndarray

    def agents(self) -> list[AgentState]:
        return [AgentState(float(x), float(b), bool(a)) for x, b, a in zip(self.wealth, self.price, self.active)]


@dataclass
class SimResult:
    snapshots: list[Snapshot]
    jumps: int


def _policy_schedule(policy: Policy, g: Grid2D, mp: MarketParams) -> list[tuple[float, np.ndarray]]:
    if isinstance(policy, str):
        if policy != "static":
            raise DomainError(f"unknown policy {policy!r}")
        field = np.full(g.shape, max(mp.static_maximizer, 0.0))
        field[0] = 0.0
        return [(-math.inf, field)]
    if isinstance(policy, ScalarField):
        return [(-math.inf, policy.values)]
    sched = sorted(((float(t), f.values) for t, f in policy), key=lambda p: p[0])
    if not sched:
        raise DomainError("empty policy schedule")
    return [(-math.inf, sched[0][1])] + sched[1:]


def _policy_at(sched, t: float) -> np.ndarray:
    cur = sched[0][1]
    for t0, f in sched:
        if t0 <= t + 1e-12:
            cur = f
        else:
            break
    return cur


def _as_path(path, n_steps: int, dt: float) -> list[PathPoint]:
    if isinstance(path, PathPoint):
        return [path] * n_steps
    if callable(path):
        return [path(n * dt) for n in range(n_steps)]
    pts = list(path)
    if len(pts) < n_steps:
        raise DomainError(f"coefficient path has {len(pts)} entries, need {n_steps}")
    return pts[:n_steps]


def sample_initial(state: DensityState, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw agents at grid nodes with probabilities given by the cell masses."""
    g = state.grid
    P = np.maximum(state.masses().ravel(), 0.0)
    P = P / P.sum()
    cells = rng.choice(P.size, size=n, p=P)
    i, j = np.divmod(cells, g.ny)
    return i * g.dx, j * g.db, i > 0


def _run_block(block, n_block, cfg, g, mp, steps, sched, m0, snap_steps, init):
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(block,))
    rng = np.random.Generator(np.random.Philox(ss))
    if init is not None:
        x, b, active = (a[block * BLOCK : block * BLOCK + n_block].copy() for a in init)
    else:
        x, b, active = sample_initial(m0, n_block, rng)
    x = x.astype(float)
    b = b.astype(float)
    active = active.astype(bool)
    out = []
    jumps = 0
    if 0 in snap_steps:
        out.append((0, x.copy(), b.copy(), active.copy()))
    for n, pt in enumerate(steps):
        policy = _policy_at(sched, n * cfg.dt)
        z = rng.standard_normal(n_block)
        u = rng.random(n_block)
        x, b, active, nj = kernels.mc_advance(
            x, b, active, policy, g.dx, g.db, mp.discount, mp.unit_cost, pt.lam_h, pt.k_t, pt.b_hat,
            mp.sigma, cfg.dt, z, u, g.x_max, g.b_max,
        )
        jumps += nj
        if n + 1 in snap_steps:
            out.append((n + 1, x.copy(), b.copy(), active.copy()))
    return out, jumps


def simulate_agents(
    cfg: SimConfig,
    mp: MarketParams,
    path,
    g: Grid2D,
    m0: DensityState | None = None,
    snapshot_times: Sequence[float] | None = None,
    initial: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> SimResult:
    """Simulate ``cfg.n_agents`` independent agents on [0, cfg.T].

    ``path`` gives the coefficients per step: a single PathPoint, a callable
    ``t -> PathPoint`` or a sequence with one entry per step. Initial states
    come from ``initial`` (arrays x, b, active) or are sampled from ``m0``.
    Snapshots are taken at the step nearest to each requested time.
    """
    if initial is None and m0 is None:
        raise DomainError("need an initial density or explicit initial states")
    n_steps = cfg.n_steps
    steps = _as_path(path, n_steps, cfg.dt)
    sched = _policy_schedule(cfg.policy, g, mp)
    peak = max(float(np.max(f)) for _, f in sched)
    worst = max(pt.lam_h for pt in steps) * peak * cfg.dt
    if worst >= THINNING_LIMIT:
        raise ThinningError(f"jump probability per step {worst:.3g} >= {THINNING_LIMIT}; reduce dt")
    times = [cfg.T] if snapshot_times is None else list(snapshot_times)
    snap_steps = sorted({min(max(int(round(t / cfg.dt)), 0), n_steps) for t in times})
    n_blocks = math.ceil(cfg.n_agents / BLOCK)
    sizes = [min(BLOCK, cfg.n_agents - k * BLOCK) for k in range(n_blocks)]
    args = [(k, sizes[k], cfg, g, mp, steps, sched, m0, set(snap_steps), initial) for k in range(n_blocks)]
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            results = list(ex.map(lambda a: _run_block(*a), args))
    else:
        results = [_run_block(*a) for a in args]
    snaps = []
    for s_idx, n in enumerate(snap_steps):
        parts = [res[0][s_idx] for res in results]
        snaps.append(
            Snapshot(
                t=n * cfg.dt,
                wealth=np.concatenate([p[1] for p in parts]),
                price=np.concatenate([p[2] for p in parts]),
                active=np.concatenate([p[3] for p in parts]),
            )
        )
    return SimResult(snaps, int(sum(r[1] for r in results)))


def empirical_density(snap: Snapshot, g: Grid2D) -> DensityState:
    """Histogram on the nearest grid node; inactive agents go to the zero-wealth line."""
    n = snap.wealth.size
    if n == 0:
        raise DomainError("empty snapshot")
    i = np.clip(np.rint(snap.wealth / g.dx).astype(np.int64), 1, g.nx - 1)
    i = np.where(snap.active & (snap.wealth > 0), i, 0)
    j = np.clip(np.rint(snap.price / g.db).astype(np.int64), 0, g.ny - 1)
    P = np.zeros(g.shape)
    np.add.at(P, (i, j), 1.0 / n)
    return DensityState.from_masses(g, P)


def density_distance(a: DensityState, b: DensityState) -> float:
    """Total-variation distance between two unit-mass states."""
    if a.grid != b.grid:
        raise DomainError("states live on different grids")
    return 0.5 * float(np.abs(a.masses() - b.masses()).sum())


def write_snapshot_csv(path, snap: Snapshot) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t [fortnight]", "x [USD]", "b [USD/token]", "active"])
        for x, b, a in zip(snap.wealth, snap.price, snap.active):
            w.writerow([repr(float(snap.t)), repr(float(x)), repr(float(b)), int(a)])


PathLike = Union[PathPoint, Callable[[float], PathPoint], Sequence[PathPoint]]
