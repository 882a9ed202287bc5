"""Mean field equilibrium: stationary fixed point and the transient path of the mean hashrate.

Time is in fortnights from genesis. One retarget window (2016 blocks at the
target rate) lasts one fortnight, so the window count at time t is floor(t).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from .errors import ConfigError, ConvergenceError, DomainError
from .fokker_planck import (
    DensityState,
    fp_forward_interval,
    initial_density,
    solve_stationary_fp,
    wealth_marginal,
)
from .grid import Grid2D, ScalarField
from .hjb import HjbParams, hjb_backward_interval, optimal_control, solve_stationary_hjb
from .market import MarketParams, node_count, production_price
from .protocol import (
    SECONDS_PER_FORTNIGHT,
    ProtocolParams,
    block_arrival_intensity,
    block_reward,
    cumulative_supply,
    initial_hash_target,
)

log = logging.getLogger(__name__)

InitialAlphaBar = Union[str, float]


@dataclass(frozen=True)
class EquilibriumConfig:
    horizon: float = 3328.0
    n_time_steps: int = 256
    fp_tol: float = 1e-10
    hjb_tol: float = 1e-10
    fixed_point_tol: float = 1e-6
    max_outer_iter: int = 200
    # "static" (theta1/c - theta2), "protocol" (designed initial hashrate),
    # "steady" (transient only: start from the stationary value) or a number
    initial_alpha_bar: InitialAlphaBar = "static"
    intensity_mode: str = "asymptotic"
    inertia: float = 0.5
    inertia_mode: str = "fixed"
    inertia_max: float = 0.95
    alpha_floor: float = 1.0
    stationary_fp_dt: float = 1e4
    hjb_max_iter: int = 200
    fp_max_iter: int = 10_000
    store_every: int = 16
    frozen_coefficients: bool = False

    def __post_init__(self):
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        if self.n_time_steps < 2:
            raise ConfigError("n_time_steps must be at least 2")
        for name in ("fp_tol", "hjb_tol", "fixed_point_tol", "alpha_floor", "stationary_fp_dt"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.max_outer_iter < 1 or self.store_every < 1:
            raise ConfigError("max_outer_iter and store_every must be at least 1")
        if self.intensity_mode not in ("asymptotic", "segment"):
            raise ConfigError("intensity_mode must be 'asymptotic' or 'segment'")
        if self.inertia_mode not in ("fixed", "adaptive"):
            raise ConfigError("inertia_mode must be 'fixed' or 'adaptive'")
        if not 0.0 <= self.inertia < 1.0 or not 0.0 <= self.inertia_max < 1.0:
            raise ConfigError("inertia weights must lie in [0, 1)")
        if isinstance(self.initial_alpha_bar, str):
            if self.initial_alpha_bar not in ("static", "protocol", "steady"):
                raise ConfigError(f"unknown initial_alpha_bar rule {self.initial_alpha_bar!r}")
        elif not self.initial_alpha_bar > 0:
            raise ConfigError("initial_alpha_bar must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / (self.n_time_steps - 1)

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_time_steps)


# --------------------------------------------------------------------------- small pieces


def mean_hashrate(alpha: ScalarField, state: DensityState) -> float:
    """Population mean of the control; the zero-wealth line contributes nothing."""
    if alpha.grid != state.grid:
        raise DomainError("alpha and density live on different grids")
    P = state.masses()
    return float(np.sum(alpha.values[1:] * P[1:]))


def inertia_update(old, candidate, w: float):
    if not 0.0 <= w < 1.0:
        raise DomainError("inertia weight must lie in [0, 1)")
    if np.ndim(old) == 0 and np.ndim(candidate) == 0:
        return w * float(old) + (1.0 - w) * float(candidate)
    return w * np.asarray(old, dtype=float) + (1.0 - w) * np.asarray(candidate, dtype=float)


def adaptive_inertia(old: np.ndarray, candidate: np.ndarray, w_max: float = 0.95) -> float:
    """Ratio of the RMS to the max norm of the path update, capped at ``w_max``.

    A spread-out update gives a weight near 1 (heavy damping); an update
    concentrated at a few times gives a small weight.
    """
    d = np.asarray(candidate, dtype=float) - np.asarray(old, dtype=float)
    dmax = float(np.max(np.abs(d)))
    if dmax == 0.0:
        return 0.0
    return min(float(np.sqrt(np.mean(d * d))) / dmax, w_max)


def active_fraction(alpha: ScalarField, state: DensityState) -> float:
    P = state.masses()
    return float(P[alpha.values > 0].sum())


def initial_alpha_bar(cfg: EquilibriumConfig, pp: ProtocolParams, mp: MarketParams) -> float:
    rule = cfg.initial_alpha_bar
    if not isinstance(rule, str):
        return float(rule)
    if rule == "protocol":
        M = node_count(cfg.horizon, mp)
        # designed hashes per window spread over the node population
        return max(initial_hash_target(M, pp) / M, cfg.alpha_floor)
    if rule == "static":
        return max(mp.static_maximizer, cfg.alpha_floor)
    raise ConfigError("initial_alpha_bar='steady' needs a stationary solution")


# --------------------------------------------------------------------------- coefficients


@dataclass(frozen=True)
class Coefficients:
    t: float
    n_nodes: float
    windows: int
    lambda_t: float
    k_t: float
    supply: float
    h_t: float
    b_hat: float


def steady_coefficients(alpha_bar: float, cfg: EquilibriumConfig, pp: ProtocolParams, mp: MarketParams) -> Coefficients:
    """Long-run limits: target block rate, fee-floor reward, capped supply, M at the horizon."""
    M = node_count(cfg.horizon, mp)
    h = M * alpha_bar
    K = pp.supply_limit
    return Coefficients(cfg.horizon, M, -1, pp.blocks_per_fortnight, pp.fee_floor, K, h, production_price(h, K, mp))


def transient_coefficients(
    t: float,
    alpha_bar: float,
    alpha_bar_prev: float,
    cfg: EquilibriumConfig,
    pp: ProtocolParams,
    mp: MarketParams,
) -> Coefficients:
    if cfg.frozen_coefficients:
        c = steady_coefficients(alpha_bar, cfg, pp, mp)
        return Coefficients(t, c.n_nodes, c.windows, c.lambda_t, c.k_t, c.supply, c.h_t, c.b_hat)
    M = node_count(t, mp)
    n_windows = int(math.floor(t))
    k = block_reward(n_windows, pp)
    K = cumulative_supply(n_windows, pp)
    h = M * alpha_bar
    lam = pp.blocks_per_fortnight
    if cfg.intensity_mode == "segment":
        h_prev = M * alpha_bar_prev
        window = pp.retarget_blocks
        if h_prev > window and h > window:
            lam = block_arrival_intensity(h_prev, h, M, pp) * SECONDS_PER_FORTNIGHT
        else:
            log.debug("segment intensity undefined at t=%g (hashes below window); using target rate", t)
    return Coefficients(t, M, n_windows, lam, k, K, h, production_price(h, K, mp))


def hjb_params(co: Coefficients, mp: MarketParams, dt: float, tol: float, max_iter: int) -> HjbParams:
    return HjbParams(
        lambda_t=co.lambda_t, k_t=co.k_t, h_t=co.h_t, b_hat=co.b_hat, market=mp, dt=dt, tol=tol, max_iter=max_iter
    )


# --------------------------------------------------------------------------- steady state


@dataclass
class SteadyState:
    v: ScalarField
    m: DensityState
    alpha: ScalarField
    alpha_bar: float
    coefficients: Coefficients
    diagnostics: dict = field(default_factory=dict)


def _steady_pass(alpha_bar, cfg, pp, mp, g, m0, v0):
    co = steady_coefficients(alpha_bar, cfg, pp, mp)
    p = hjb_params(co, mp, 1.0, cfg.hjb_tol, cfg.hjb_max_iter)
    v, alpha, hjb_hist = solve_stationary_hjb(g, p, v0=v0)
    m, info = solve_stationary_fp(
        alpha, p, m0=m0, dt=cfg.stationary_fp_dt, tol=cfg.fp_tol, max_iter=cfg.fp_max_iter, return_info=True
    )
    cand = mean_hashrate(alpha, m)
    return co, v, alpha, m, cand, hjb_hist, info


def solve_steady_state(
    cfg: EquilibriumConfig,
    pp: ProtocolParams,
    mp: MarketParams,
    g: Grid2D,
    m0: DensityState | None = None,
) -> SteadyState:
    """Fixed point in the stationary mean hashrate.

    Alternates the stationary HJB solve, control recovery and the stationary
    density (started from ``m0``), damping the update of the mean hashrate by
    ``cfg.inertia``. Converged when ``|candidate - alpha_bar| / alpha_bar`` is
    below ``cfg.fixed_point_tol``.
    """
    m0 = m0 if m0 is not None else initial_density(g)
    alpha_bar = initial_alpha_bar(cfg, pp, mp)
    v = None
    history: list[float] = []
    floor_events = 0
    sub: dict = {}
    for it in range(1, cfg.max_outer_iter + 1):
        co, v, alpha, m, cand, hjb_hist, info = _steady_pass(alpha_bar, cfg, pp, mp, g, m0, v)
        if cand < cfg.alpha_floor:
            floor_events += 1
            log.info("steady state: mean hashrate %.3e floored at %.3e", cand, cfg.alpha_floor)
            cand = cfg.alpha_floor
        res = abs(cand - alpha_bar) / alpha_bar
        history.append(res)
        sub = {
            "hjb_iterations": len(hjb_hist),
            "hjb_residual": hjb_hist[-1],
            "fp_iterations": info.iterations,
            "fp_residual": info.residuals[-1],
            "fp_renorm_max_deviation": float(np.max(np.abs(np.array(info.renorm_factors) - 1.0))),
        }
        if res < cfg.fixed_point_tol:
            diag = {
                "outer_iterations": it,
                "residual_history": history,
                "alpha_bar_candidate": cand,
                "floor_events": floor_events,
                "converged": True,
                **sub,
            }
            return SteadyState(v, m, alpha, alpha_bar, co, diag)
        alpha_bar = inertia_update(alpha_bar, cand, cfg.inertia)
    raise ConvergenceError(f"steady state did not converge in {cfg.max_outer_iter} outer iterations", history)


# --------------------------------------------------------------------------- transient


@dataclass
class EquilibriumSolution:
    times: np.ndarray
    alpha_bar_path: np.ndarray
    slice_indices: list[int]
    v_path: list[ScalarField]
    m_path: list[DensityState]
    alpha_path: list[ScalarField]
    wealth_marginals: np.ndarray
    active_fractions: np.ndarray
    coefficients: list[Coefficients]
    steady: SteadyState
    diagnostics: dict

    @property
    def v_inf(self) -> ScalarField:
        return self.steady.v

    @property
    def m_inf(self) -> DensityState:
        return self.steady.m

    @property
    def alpha_inf(self) -> ScalarField:
        return self.steady.alpha

    def coefficient_table(self) -> dict[str, np.ndarray]:
        return {
            "t": self.times,
            "n_nodes": np.array([c.n_nodes for c in self.coefficients]),
            "lambda": np.array([c.lambda_t for c in self.coefficients]),
            "k": np.array([c.k_t for c in self.coefficients]),
            "supply": np.array([c.supply for c in self.coefficients]),
            "h": np.array([c.h_t for c in self.coefficients]),
            "b_hat": np.array([c.b_hat for c in self.coefficients]),
        }


def _sweep(alpha_bar_path, cfg, pp, mp, g, m0, steady, keep):
    """One backward HJB sweep and one forward FP sweep for a given mean-hashrate path."""
    times = cfg.times()
    n = len(times)
    dt = cfg.dt
    coeffs = [
        transient_coefficients(times[i], alpha_bar_path[i], alpha_bar_path[max(i - 1, 0)], cfg, pp, mp)
        for i in range(n)
    ]
    params = [hjb_params(c, mp, dt, cfg.hjb_tol, cfg.hjb_max_iter) for c in coeffs]
    v = steady.v
    alphas: list[ScalarField | None] = [None] * n
    vs: dict[int, ScalarField] = {}
    alphas[-1] = optimal_control(v, params[-1])
    if n - 1 in keep:
        vs[n - 1] = v
    hjb_sub = 0
    for i in range(n - 2, -1, -1):
        v, alpha, k = hjb_backward_interval(v, params[i])
        alphas[i] = alpha
        hjb_sub += k
        if i in keep:
            vs[i] = v
    state = m0
    cand = np.empty(n)
    marg = np.empty((n, g.nx))
    act = np.empty(n)
    ms: dict[int, DensityState] = {}
    fp_sub = 0
    mass_err = 0.0
    for i in range(n):
        cand[i] = mean_hashrate(alphas[i], state)
        marg[i] = wealth_marginal(state)
        act[i] = active_fraction(alphas[i], state)
        mass_err = max(mass_err, abs(state.total_mass() - 1.0))
        if i in keep:
            ms[i] = state
        if i < n - 1:
            state, k = fp_forward_interval(state, alphas[i], params[i])
            fp_sub += k
    extra = {"hjb_substeps": hjb_sub, "fp_substeps": fp_sub, "max_mass_error": mass_err}
    return coeffs, alphas, vs, ms, cand, marg, act, extra


def solve_transient(
    cfg: EquilibriumConfig,
    m0: DensityState,
    steady: SteadyState,
    pp: ProtocolParams,
    mp: MarketParams,
    g: Grid2D,
) -> EquilibriumSolution:
    """Backward-forward fixed point for the mean hashrate path on [0, horizon].

    Each outer iteration solves the HJB backward from the stationary value
    function, recovers the control, pushes ``m0`` forward, and relaxes the
    path towards the implied mean hashrate. Converged when the max-norm change
    relative to the path's max is below ``cfg.fixed_point_tol``.
    """
    if abs(m0.total_mass() - 1.0) > 1e-8:
        raise DomainError("initial density must have unit mass")
    times = cfg.times()
    n = len(times)
    if cfg.initial_alpha_bar == "steady":
        start = steady.alpha_bar
    else:
        start = initial_alpha_bar(cfg, pp, mp)
    path = np.full(n, float(start))
    keep = set(range(0, n, cfg.store_every)) | {n - 1}
    history: list[float] = []
    weights: list[float] = []
    floor_events = 0
    for it in range(1, cfg.max_outer_iter + 1):
        coeffs, alphas, vs, ms, cand, marg, act, extra = _sweep(path, cfg, pp, mp, g, m0, steady, keep)
        low = cand < cfg.alpha_floor
        if low.any():
            floor_events += int(low.sum())
            cand = np.maximum(cand, cfg.alpha_floor)
        res = float(np.max(np.abs(cand - path)) / np.max(np.abs(path)))
        history.append(res)
        if res < cfg.fixed_point_tol:
            idx = sorted(keep)
            flagged = len(history) >= 3 and not (history[-3] >= history[-2] >= history[-1])
            diag = {
                "converged": True,
                "outer_iterations": it,
                "residual_history": history,
                "inertia_weights": weights,
                "floor_events": floor_events,
                "flag_nonmonotone_residual": bool(flagged),
                "dt": cfg.dt,
                "n_time_steps": cfg.n_time_steps,
                "terminal_value_gap": float(np.max(np.abs(vs[n - 1].values - steady.v.values))),
                **extra,
            }
            return EquilibriumSolution(
                times=times,
                alpha_bar_path=cand,
                slice_indices=idx,
                v_path=[vs[i] for i in idx],
                m_path=[ms[i] for i in idx],
                alpha_path=[alphas[i] for i in idx],
                wealth_marginals=marg,
                active_fractions=act,
                coefficients=coeffs,
                steady=steady,
                diagnostics=diag,
            )
        w = adaptive_inertia(path, cand, cfg.inertia_max) if cfg.inertia_mode == "adaptive" else cfg.inertia
        weights.append(w)
        path = inertia_update(path, cand, w)
    raise ConvergenceError(f"transient fixed point did not converge in {cfg.max_outer_iter} outer iterations", history)


def config_dict(cfg: EquilibriumConfig) -> dict:
    return asdict(cfg)
