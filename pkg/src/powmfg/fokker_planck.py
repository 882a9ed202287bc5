"""Forward evolution of the node density over wealth x price.

The density is split into an absolutely continuous part ``interior`` (on
x > 0) and a singular part ``eta`` on the line x = 0, holding inactive
nodes. Internally the solver works with cell masses

    P[0, j]  = eta[j] * db
    P[i, j]  = interior[i, j] * dx * db      (i >= 1)

so that the discrete operator is exactly the transpose of the HJB generator
and conserves total mass to rounding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu, spsolve

from . import kernels
from .errors import CFLError, ConvergenceError, DomainError, SolverError
from .grid import Grid2D, ScalarField, jump_shift, write_field_csv, write_vector_csv
from .hjb import HjbParams, hjb_generator, price_bands

log = logging.getLogger(__name__)


@dataclass
class DensityState:
    interior: ScalarField
    eta: np.ndarray

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=float)
        if self.eta.shape != (self.grid.ny,):
            raise DomainError("eta must have one entry per price node")

    @property
    def grid(self) -> Grid2D:
        return self.interior.grid

    def masses(self) -> np.ndarray:
        g = self.grid
        P = self.interior.values * (g.dx * g.db)
        P[0] = self.eta * g.db
        return P

    @classmethod
    def from_masses(cls, g: Grid2D, P: np.ndarray) -> "DensityState":
        vals = np.asarray(P, dtype=float) / (g.dx * g.db)
        eta = np.asarray(P[0], dtype=float) / g.db
        vals = vals.copy()
        vals[0] = 0.0
        return cls(ScalarField(g, vals), eta)

    def total_mass(self) -> float:
        return float(self.masses().sum())

    def copy(self) -> "DensityState":
        return DensityState(self.interior.copy(), self.eta.copy())


def initial_density(g: Grid2D) -> DensityState:
    """Exponential wealth profile (1/dx) exp(-x/dx) with every node at price 0.

    The profile's mass on x > 0 is 1/(e - 1); the remainder sits on the
    zero-wealth line so the state has unit mass.
    """
    P = np.zeros(g.shape)
    P[1:, 0] = np.exp(-np.arange(1, g.nx))
    P[0, 0] = 1.0 - P[1:, 0].sum()
    return DensityState.from_masses(g, P)


def wealth_marginal(state: DensityState) -> np.ndarray:
    """Probability mass per wealth node; index 0 is the inactive mass on x = 0."""
    return state.masses().sum(axis=1)


def _common(g: Grid2D, p: HjbParams):
    off, frac = jump_shift(p.k_t, g)
    return g.x, off, frac, p.market.discount, p.market.unit_cost, p.lam_h


def _implicit_price(P: np.ndarray, g: Grid2D, p: HjbParams, dt: float) -> np.ndarray:
    up, down = price_bands(g, p)
    lower = np.zeros(g.ny)
    upper = np.zeros(g.ny)
    lower[1:] = -dt * up[:-1]
    upper[:-1] = -dt * down[1:]
    diag = 1.0 + dt * (up + down)
    return kernels.tridiag_solve(lower, diag, upper, P)


def _step_masses(P: np.ndarray, alpha: np.ndarray, g: Grid2D, p: HjbParams, dt: float) -> np.ndarray:
    x, off, frac, r, c, lam_h = _common(g, p)
    P1 = P + dt * kernels.scatter_xj(P, alpha, x, off, frac, r, c, lam_h)
    return _implicit_price(P1, g, p, dt)


def cfl_limit(alpha: ScalarField, p: HjbParams) -> float:
    g = alpha.grid
    x, off, frac, r, c, lam_h = _common(g, p)
    rho = float(kernels.exit_rate(alpha.values, x, off, frac, r, c, lam_h).max())
    return math.inf if rho == 0 else 1.0 / rho


def fp_forward_step(state: DensityState, alpha: ScalarField, p: HjbParams) -> DensityState:
    """One step of size ``p.dt``: explicit upwind wealth transport and jumps, implicit price part.

    Raises CFLError if ``p.dt`` exceeds the explicit stability bound.
    """
    if np.any(alpha.values < 0):
        raise DomainError("alpha must be nonnegative")
    dt_max = cfl_limit(alpha, p)
    if p.dt > dt_max * (1.0 + 1e-12):
        raise CFLError(p.dt, dt_max)
    g = state.grid
    P = _step_masses(state.masses(), alpha.values, g, p, p.dt)
    if not np.all(np.isfinite(P)):
        raise SolverError("fp_forward_step: non-finite mass")
    return DensityState.from_masses(g, P)


def fp_implicit_step(state: DensityState, alpha: ScalarField, p: HjbParams) -> DensityState:
    """Backward Euler step (I - dt A^T) P_new = P; mass conserving and nonnegative for any dt."""
    g = state.grid
    n = g.nx * g.ny
    G = hjb_generator(g, alpha, p).T
    lhs = (sp.identity(n, format="csc") - p.dt * G).tocsc()
    P = spsolve(lhs, state.masses().ravel()).reshape(g.shape)
    if not np.all(np.isfinite(P)):
        raise SolverError("fp_implicit_step: non-finite mass")
    return DensityState.from_masses(g, np.maximum(P, 0.0))


def fp_forward_interval(
    state: DensityState, alpha: ScalarField, p: HjbParams, safety: float = 0.9, max_substeps: int = 64
) -> tuple[DensityState, int]:
    """Advance by ``p.dt`` with the control held fixed, in CFL-stable substeps.

    Falls back to one implicit step (reported as 0 substeps) when more than
    ``max_substeps`` would be needed.
    """
    g = state.grid
    dt_max = cfl_limit(alpha, p)
    n_sub = 1 if p.dt <= safety * dt_max else math.ceil(p.dt / (safety * dt_max))
    if n_sub > max_substeps:
        return fp_implicit_step(state, alpha, p), 0
    h = p.dt / n_sub
    P = state.masses()
    for _ in range(n_sub):
        P = _step_masses(P, alpha.values, g, p, h)
    if not np.all(np.isfinite(P)):
        raise SolverError("fp_forward_interval: non-finite mass")
    return DensityState.from_masses(g, P), n_sub


def fp_generator(g: Grid2D, alpha: ScalarField, p: HjbParams) -> sp.csr_matrix:
    """Sparse generator G acting on flattened cell masses: dP/dt = G P.

    Assembled from the outgoing fluxes of every source cell (column = source,
    row = destination).
    """
    nx, ny = g.shape
    x, off, frac, r, c, lam_h = _common(g, p)
    up, down = price_bands(g, p)
    a = alpha.values
    rows, cols, vals = [], [], []

    def flow(src, dst, rate):
        rows.append(dst)
        cols.append(src)
        vals.append(rate)
        rows.append(src)
        cols.append(src)
        vals.append(-rate)

    for i in range(nx):
        for j in range(ny):
            s = i * ny + j
            mu = r * x[i] - c * a[i, j]
            if mu > 0 and i < nx - 1:
                flow(s, s + ny, mu / g.dx)
            elif mu < 0 and i > 0:
                flow(s, s - ny, -mu / g.dx)
            q = lam_h * a[i, j]
            if q > 0:
                lo = min(i + int(off[j]), nx - 1)
                hi = min(lo + 1, nx - 1)
                flow(s, lo * ny + j, q * (1.0 - frac[j]))
                flow(s, hi * ny + j, q * frac[j])
            if up[j] > 0:
                flow(s, s + 1, up[j])
            if down[j] > 0:
                flow(s, s - 1, down[j])
    n = nx * ny
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def fp_step_matrix(g: Grid2D, alpha: ScalarField, p: HjbParams) -> np.ndarray:
    """Dense one-step transition matrix on masses (columns are source cells)."""
    n = g.nx * g.ny
    out = np.empty((n, n))
    for s in range(n):
        e = np.zeros(n)
        e[s] = 1.0
        out[:, s] = _step_masses(e.reshape(g.shape), alpha.values, g, p, p.dt).ravel()
    return out


@dataclass
class StationaryInfo:
    iterations: int
    residuals: list[float] = field(default_factory=list)
    renorm_factors: list[float] = field(default_factory=list)


def solve_stationary_fp(
    alpha: ScalarField,
    p: HjbParams,
    m0: DensityState | None = None,
    dt: float = 1e4,
    tol: float | None = None,
    max_iter: int | None = None,
    return_info: bool = False,
):
    """Long-run density under a fixed control.

    Iterates implicit Euler steps (I - dt G) P_new = P from ``m0`` (default:
    :func:`initial_density`) until the max-norm change of the cell masses
    drops below ``tol``. The implicit step has the same fixed points as the
    explicit one but no stability limit, so dt can be large. Each iterate is
    renormalised to unit mass; the factor must stay within 1 +- 1e-8.
    """
    g = alpha.grid
    tol = p.tol if tol is None else tol
    max_iter = max(p.max_iter, 10_000) if max_iter is None else max_iter
    state = m0 if m0 is not None else initial_density(g)
    P = state.masses().ravel()
    G = fp_generator(g, alpha, p)
    n = g.nx * g.ny
    lu = splu((sp.identity(n, format="csc") - dt * G).tocsc())
    info = StationaryInfo(0)
    for it in range(1, max_iter + 1):
        P_new = lu.solve(P)
        total = P_new.sum()
        if not np.isfinite(total) or total <= 0:
            raise SolverError("solve_stationary_fp: mass lost")
        factor = 1.0 / total
        info.renorm_factors.append(float(factor))
        if abs(factor - 1.0) > 1e-8:
            log.warning("solve_stationary_fp: renormalisation factor %.3e outside 1 +- 1e-8", factor)
        P_new = np.maximum(P_new * factor, 0.0)
        res = float(np.max(np.abs(P_new - P)))
        info.residuals.append(res)
        P = P_new
        if res < tol:
            info.iterations = it
            out = DensityState.from_masses(g, P.reshape(g.shape))
            return (out, info) if return_info else out
    raise ConvergenceError(f"stationary FP did not converge in {max_iter} iterations", info.residuals)


def write_density(directory, state: DensityState, stem: str) -> list[str]:
    """Write ``<stem>.csv`` (interior density) and ``eta_<suffix>.csv``; returns file names."""
    from pathlib import Path

    d = Path(directory)
    suffix = stem.split("_", 1)[1] if "_" in stem else stem
    interior = f"{stem}.csv"
    eta = f"eta_{suffix}.csv"
    write_field_csv(d / interior, state.interior, unit="1/(USD*USD/token)")
    write_vector_csv(d / eta, {"b [USD/token]": state.grid.b, "eta [1/(USD/token)]": state.eta})
    return [interior, eta]
