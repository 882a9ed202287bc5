"""Backward HJB solver for a single node's value v(x, b) and its optimal hashrate.

Discretisation on the wealth x price grid:

* wealth drift ``r x - c alpha``: explicit upwind differences;
* jumps ``x -> x + k b`` at rate ``(lambda / h) alpha``: explicit, with the
  destination split linearly between two wealth nodes and clamped at x_max;
* price drift ``b_hat - b`` and diffusion ``sigma^2 / 2``: implicit, upwind,
  reflecting at both price boundaries (one tridiagonal solve per wealth row).

At zero wealth the spending constraint ``c alpha <= r x`` forces alpha = 0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from . import kernels
from .errors import CFLError, ConvergenceError, DomainError, SolverError
from .grid import Grid2D, ScalarField, jump_shift
from .market import MarketParams, utility

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HjbParams:
    """Coefficients frozen over one time step.

    ``lambda_t`` is in blocks per fortnight, ``h_t`` (total hashrate) in
    TeraHash per fortnight and ``dt`` in fortnights.
    """

    lambda_t: float
    k_t: float
    h_t: float
    b_hat: float
    market: MarketParams = MarketParams()
    dt: float = 1.0
    tol: float = 1e-10
    max_iter: int = 200

    def __post_init__(self):
        if not self.h_t > 0:
            raise DomainError("h_t must be positive")
        if not self.dt > 0 or not self.tol > 0:
            raise DomainError("dt and tol must be positive")
        if self.lambda_t < 0 or self.k_t < 0 or self.b_hat < 0:
            raise DomainError("lambda_t, k_t and b_hat must be nonnegative")
        if self.max_iter < 1:
            raise DomainError("max_iter must be at least 1")

    @property
    def lam_h(self) -> float:
        return self.lambda_t / self.h_t

    def with_dt(self, dt: float) -> "HjbParams":
        return replace(self, dt=dt)


def price_bands(g: Grid2D, p: HjbParams) -> tuple[np.ndarray, np.ndarray]:
    """Rates of moving up / down one price cell (upwind drift + diffusion).

    Reflection: no upward move from the top row, no downward move from row 0.
    """
    drift = p.b_hat - g.b
    diff = 0.5 * p.market.sigma**2 / g.db**2
    up = np.maximum(drift, 0.0) / g.db + diff
    down = np.maximum(-drift, 0.0) / g.db + diff
    up[-1] = 0.0
    down[0] = 0.0
    return up, down


def _common(g: Grid2D, p: HjbParams):
    off, frac = jump_shift(p.k_t, g)
    return g.x, off, frac, p.market.discount, p.market.unit_cost, p.lam_h


def optimal_control_with_flags(v: ScalarField, p: HjbParams) -> tuple[ScalarField, np.ndarray]:
    g = v.grid
    x, off, frac, r, c, lam_h = _common(g, p)
    m = p.market
    alpha, viol = kernels.control(v.values, x, off, frac, r, c, lam_h, m.theta1, m.theta2)
    return ScalarField(g, alpha), viol


def optimal_control(v: ScalarField, p: HjbParams) -> ScalarField:
    """Closed-form maximiser of the Hamiltonian with upwind choice of the x-gradient.

    ``alpha = theta1 / (c (1 + dv/dx) - (lambda/h)(v(x + k b) - v(x))) - theta2``,
    clipped at zero. Cells whose denominator is not positive get alpha = 0;
    see :func:`monotonicity_violations`.
    """
    alpha, viol = optimal_control_with_flags(v, p)
    if viol.any():
        log.warning("optimal_control: %d cells with nonpositive denominator", int(viol.sum()))
    return alpha


def monotonicity_violations(v: ScalarField, p: HjbParams) -> list[tuple[int, int]]:
    """Cells where the control denominator is nonpositive (v not increasing in wealth)."""
    _, viol = optimal_control_with_flags(v, p)
    return [(int(i), int(j)) for i, j in zip(*np.nonzero(viol))]


def hamiltonian(alpha, grad_x, jump_diff, x, p: HjbParams):
    """Control-dependent part u + (r x - c alpha) dv/dx + (lambda/h) alpha jump_diff."""
    m = p.market
    return utility(alpha, m) + (m.discount * x - m.unit_cost * alpha) * grad_x + p.lam_h * alpha * jump_diff


def hjb_generator(g: Grid2D, alpha: ScalarField, p: HjbParams) -> sp.csr_matrix:
    """Sparse generator A(alpha) acting on v flattened wealth-major (index i * ny + j)."""
    nx, ny = g.shape
    x, off, frac, r, c, lam_h = _common(g, p)
    a = alpha.values
    idx = np.arange(nx * ny).reshape(nx, ny)
    ii = np.broadcast_to(np.arange(nx)[:, None], (nx, ny))
    jj = np.broadcast_to(np.arange(ny)[None, :], (nx, ny))
    rows, cols, vals = [], [], []

    def add(mask, dest_i, dest_j, rate):
        src = idx[mask]
        dst = idx[dest_i[mask], dest_j[mask]]
        rt = rate[mask]
        rows.extend([src, src])
        cols.extend([dst, src])
        vals.extend([rt, -rt])

    mu = r * x[:, None] - c * a
    add((mu > 0) & (ii < nx - 1), np.minimum(ii + 1, nx - 1), jj, mu / g.dx)
    add((mu < 0) & (ii > 0), np.maximum(ii - 1, 0), jj, -mu / g.dx)
    q = lam_h * a
    lo = np.minimum(ii + off[None, :], nx - 1)
    hi = np.minimum(lo + 1, nx - 1)
    add(q > 0, lo, jj, q * (1.0 - frac)[None, :])
    add(q > 0, hi, jj, q * frac[None, :])
    up, down = price_bands(g, p)
    up2 = np.broadcast_to(up[None, :], (nx, ny))
    down2 = np.broadcast_to(down[None, :], (nx, ny))
    add(up2 > 0, ii, np.minimum(jj + 1, ny - 1), up2)
    add(down2 > 0, ii, np.maximum(jj - 1, 0), down2)
    n = nx * ny
    A = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return A.tocsr()


def explicit_rate(alpha: ScalarField, p: HjbParams) -> float:
    """Largest per-cell exit rate of the explicit (wealth drift + jump) part."""
    g = alpha.grid
    x, off, frac, r, c, lam_h = _common(g, p)
    return float(kernels.exit_rate(alpha.values, x, off, frac, r, c, lam_h).max())


def max_stable_dt(alpha: ScalarField, p: HjbParams) -> float:
    rho = explicit_rate(alpha, p)
    return math.inf if rho == 0 else 1.0 / rho


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise SolverError(f"{what}: non-finite values after step")


def hjb_backward_step(v_next: ScalarField, p: HjbParams) -> tuple[ScalarField, ScalarField]:
    """One backward Euler step of size ``p.dt`` from ``v_next``.

    The control is frozen from ``v_next`` for the explicit terms, the price
    operator is solved implicitly, and the control is refreshed from the new v.
    Raises CFLError when the explicit part is unstable at this dt.
    """
    g = v_next.grid
    x, off, frac, r, c, lam_h = _common(g, p)
    m = p.market
    dt = p.dt
    a0, _ = kernels.control(v_next.values, x, off, frac, r, c, lam_h, m.theta1, m.theta2)
    rho = float(kernels.exit_rate(a0, x, off, frac, r, c, lam_h).max())
    if dt * rho > 1.0 + 1e-12:
        raise CFLError(dt, 1.0 / rho)
    rhs = v_next.values + dt * (utility(a0, m) + kernels.apply_xj(v_next.values, a0, x, off, frac, r, c, lam_h))
    up, down = price_bands(g, p)
    diag = 1.0 + r * dt + dt * (up + down)
    v = kernels.tridiag_solve(-dt * down, diag, -dt * up, rhs)
    _check_finite(v, "hjb_backward_step")
    alpha, _ = kernels.control(v, x, off, frac, r, c, lam_h, m.theta1, m.theta2)
    return ScalarField(g, v), ScalarField(g, alpha)


def hjb_implicit_step(v_next: ScalarField, p: HjbParams) -> tuple[ScalarField, ScalarField]:
    """Fully implicit policy-evaluation step: ((1 + r dt) I - dt A(alpha0)) v = v_next + dt u(alpha0).

    Unconditionally monotone; used when the explicit step would need too many substeps.
    """
    g = v_next.grid
    m = p.market
    a0 = optimal_control(v_next, p)
    n = g.nx * g.ny
    A = hjb_generator(g, a0, p)
    lhs = ((1.0 + m.discount * p.dt) * sp.identity(n, format="csr") - p.dt * A).tocsc()
    rhs = (v_next.values + p.dt * utility(a0.values, m)).ravel()
    v = spsolve(lhs, rhs).reshape(g.shape)
    _check_finite(v, "hjb_implicit_step")
    vf = ScalarField(g, v)
    return vf, optimal_control(vf, p)


def hjb_backward_interval(
    v_next: ScalarField, p: HjbParams, safety: float = 0.9, max_substeps: int = 64
) -> tuple[ScalarField, ScalarField, int]:
    """Advance backward by ``p.dt``, subdividing into CFL-stable substeps.

    If more than ``max_substeps`` would be needed, one fully implicit step is
    taken instead (reported as 0 substeps). Returns (v, alpha, substeps).
    """
    g = v_next.grid
    x, off, frac, r, c, lam_h = _common(g, p)
    m = p.market
    a0, _ = kernels.control(v_next.values, x, off, frac, r, c, lam_h, m.theta1, m.theta2)
    rho = float(kernels.exit_rate(a0, x, off, frac, r, c, lam_h).max())
    if p.dt * rho > safety * max_substeps:
        v, alpha = hjb_implicit_step(v_next, p)
        return v, alpha, 0
    remaining = p.dt
    v = v_next
    alpha = None
    n_sub = 0
    while remaining > 1e-12 * p.dt:
        a0, _ = kernels.control(v.values, x, off, frac, r, c, lam_h, m.theta1, m.theta2)
        rho = float(kernels.exit_rate(a0, x, off, frac, r, c, lam_h).max())
        h = remaining if rho == 0 else min(remaining, safety / rho)
        # split what remains evenly so the last substep is not a sliver
        if h < remaining:
            h = remaining / math.ceil(remaining / h)
        v, alpha = hjb_backward_step(v, p.with_dt(h))
        remaining -= h
        n_sub += 1
        if n_sub > 4 * max_substeps:
            v, alpha = hjb_implicit_step(v, p.with_dt(remaining))
            break
    return v, alpha, n_sub


def initial_value_guess(g: Grid2D, p: HjbParams) -> ScalarField:
    m = p.market
    a_star = max(m.static_maximizer, 0.0)
    r = max(m.discount, 1e-12)
    return ScalarField(g, np.full(g.shape, utility(a_star, m) / r))


def solve_stationary_hjb(
    g: Grid2D, p: HjbParams, v0: ScalarField | None = None
) -> tuple[ScalarField, ScalarField, list[float]]:
    """Policy iteration for r v = max_alpha {u + A(alpha) v}.

    Each iteration solves the linear system (r I - A(alpha)) v = u(alpha)
    and refreshes alpha. Stops once the max-norm change of v falls below
    ``p.tol * max(1, |v|_inf)``. Returns (v_inf, alpha_inf, residual history).
    """
    m = p.market
    if not m.discount > 0:
        raise DomainError("the stationary problem needs a positive discount rate")
    v = v0 if v0 is not None else initial_value_guess(g, p)
    alpha = optimal_control(v, p)
    n = g.nx * g.ny
    eye = sp.identity(n, format="csr")
    history: list[float] = []
    for it in range(p.max_iter):
        A = hjb_generator(g, alpha, p)
        rhs = np.asarray(utility(alpha.values, m)).ravel()
        try:
            sol = spsolve((m.discount * eye - A).tocsc(), rhs)
        except Exception as exc:  # pragma: no cover - scipy raises various types
            raise SolverError(f"stationary HJB linear solve failed: {exc}") from exc
        _check_finite(sol, "solve_stationary_hjb")
        v_new = ScalarField(g, sol.reshape(g.shape))
        res = float(np.max(np.abs(v_new.values - v.values)))
        history.append(res)
        v = v_new
        alpha_new = optimal_control(v, p)
        same_policy = np.array_equal(alpha_new.values, alpha.values)
        alpha = alpha_new
        if res <= p.tol * max(1.0, float(np.max(np.abs(v.values)))) or (same_policy and it > 0):
            return v, alpha, history
    raise ConvergenceError(f"stationary HJB did not converge in {p.max_iter} iterations", history)
