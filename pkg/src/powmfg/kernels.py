"""Hot loops shared by the HJB, Fokker-Planck and Monte Carlo solvers.

Every kernel exists twice: a numba ``@njit`` version and a vectorised numpy
version. The numpy versions are used when numba is unavailable or when the
environment variable ``MFG_DISABLE_NUMBA`` is set to a non-empty value other
than ``0``. Both backends produce the same numbers up to rounding.

Conventions: arrays are wealth-major ``(nx, ny)``. ``off`` and ``frac`` are the
integer and fractional wealth-cell offsets of a jump ``k * b_j`` per price
column. ``lam_h`` is the per-unit-hashrate jump intensity ``lambda / h``.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.linalg import solve_banded

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def numba_enabled() -> bool:
    flag = os.environ.get("MFG_DISABLE_NUMBA", "")
    return _HAVE_NUMBA and flag in ("", "0")


def backend() -> str:
    return "numba" if numba_enabled() else "numpy"


# --------------------------------------------------------------------------- numpy


def _dest_indices(nx: int, off: np.ndarray):
    i = np.arange(nx)[:, None]
    lo = np.minimum(i + off[None, :], nx - 1)
    hi = np.minimum(lo + 1, nx - 1)
    return lo, hi


def _control_np(v, x, off, frac, r, c, lam_h, th1, th2):
    nx, ny = v.shape
    lo, hi = _dest_indices(nx, off)
    cols = np.arange(ny)[None, :]
    jump = (1.0 - frac) * v[lo, cols] + frac * v[hi, cols] - v
    dx = x[1] - x[0]
    p_f = np.zeros_like(v)
    p_f[:-1] = (v[1:] - v[:-1]) / dx
    p_b = np.zeros_like(v)
    p_b[1:] = (v[1:] - v[:-1]) / dx
    drift0 = r * x[:, None] * np.ones((1, ny))

    def alpha_of(p):
        den = c * (1.0 + p) - lam_h * jump
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(den > 0, th1 / np.where(den > 0, den, 1.0) - th2, 0.0)
        return np.maximum(a, 0.0), den

    a_f, den_f = alpha_of(p_f)
    a_b, den_b = alpha_of(p_b)
    mu_f = drift0 - c * a_f
    mu_b = drift0 - c * a_b
    use_f = mu_f > 0
    use_b = (~use_f) & (mu_b < 0)
    if c > 0:
        a_0 = drift0 / c
    else:
        a_0 = a_f
    alpha = np.where(use_f, a_f, np.where(use_b, a_b, a_0))
    den = np.where(use_f, den_f, np.where(use_b, den_b, np.inf))
    viol = (den <= 0) & (th1 > 0)
    alpha[0, :] = 0.0
    viol[0, :] = False
    return alpha, viol


def _apply_xj_np(v, alpha, x, off, frac, r, c, lam_h):
    nx, ny = v.shape
    dx = x[1] - x[0]
    mu = r * x[:, None] - c * alpha
    out = np.zeros_like(v)
    fwd = mu[:-1] > 0
    out[:-1] += np.where(fwd, mu[:-1] / dx * (v[1:] - v[:-1]), 0.0)
    bwd = mu[1:] < 0
    out[1:] += np.where(bwd, -mu[1:] / dx * (v[:-1] - v[1:]), 0.0)
    lo, hi = _dest_indices(nx, off)
    cols = np.arange(ny)[None, :]
    q = lam_h * alpha
    out += q * ((1.0 - frac) * (v[lo, cols] - v) + frac * (v[hi, cols] - v))
    return out


def _scatter_xj_np(P, alpha, x, off, frac, r, c, lam_h):
    nx, ny = P.shape
    dx = x[1] - x[0]
    mu = r * x[:, None] - c * alpha
    out = np.zeros_like(P)
    # forward transport i -> i+1
    flux = np.where(mu[:-1] > 0, mu[:-1] / dx * P[:-1], 0.0)
    out[:-1] -= flux
    out[1:] += flux
    # backward transport i -> i-1
    flux = np.where(mu[1:] < 0, -mu[1:] / dx * P[1:], 0.0)
    out[1:] -= flux
    out[:-1] += flux
    # jumps
    q = lam_h * alpha * P
    out -= q
    lo, hi = _dest_indices(nx, off)
    cols = np.broadcast_to(np.arange(ny)[None, :], P.shape)
    np.add.at(out, (lo, cols), (1.0 - frac) * q)
    np.add.at(out, (hi, cols), frac * q)
    return out


def _exit_rate_np(alpha, x, off, frac, r, c, lam_h):
    nx, ny = alpha.shape
    dx = x[1] - x[0]
    mu = r * x[:, None] - c * alpha
    rate = np.zeros_like(alpha)
    rate[:-1] += np.where(mu[:-1] > 0, mu[:-1] / dx, 0.0)
    rate[1:] += np.where(mu[1:] < 0, -mu[1:] / dx, 0.0)
    i = np.arange(nx)[:, None]
    lo, hi = _dest_indices(nx, off)
    stay = (1.0 - frac) * (lo == i) + frac * (hi == i)
    rate += lam_h * alpha * (1.0 - stay)
    return rate


def _tridiag_solve_np(lower, diag, upper, rhs):
    """Solve T y = rhs[i, :] for every row i; T is ny x ny tridiagonal."""
    ny = diag.shape[0]
    ab = np.zeros((3, ny))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    return solve_banded((1, 1), ab, rhs.T, check_finite=False).T


def _mc_advance_np(x, b, active, policy, dx, db, r, c, lam_h, k, b_hat, sigma, dt, z, u, x_max, b_max):
    nx, ny = policy.shape
    sx = np.clip(x / dx, 0.0, nx - 1.0)
    sb = np.clip(b / db, 0.0, ny - 1.0)
    i0 = np.minimum(np.floor(sx).astype(np.int64), nx - 2)
    j0 = np.minimum(np.floor(sb).astype(np.int64), ny - 2)
    fx = sx - i0
    fb = sb - j0
    a = (
        (1 - fx) * (1 - fb) * policy[i0, j0]
        + fx * (1 - fb) * policy[i0 + 1, j0]
        + (1 - fx) * fb * policy[i0, j0 + 1]
        + fx * fb * policy[i0 + 1, j0 + 1]
    )
    a = np.where(active, np.maximum(a, 0.0), 0.0)
    jump = u < lam_h * a * dt
    xn = x + (r * x - c * a) * dt + np.where(jump, k * b, 0.0)
    dead = xn <= 0.0
    xn = np.where(dead, 0.0, np.minimum(xn, x_max))
    active_new = active & ~dead
    bn = np.clip(b + (b_hat - b) * dt + sigma * math.sqrt(dt) * z, 0.0, b_max)
    return xn, bn, active_new, int(jump.sum())


# --------------------------------------------------------------------------- numba

if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _alpha_at(den, c, th1, th2):
        if den <= 0.0:
            return 0.0
        a = th1 / den - th2
        return a if a > 0.0 else 0.0

    @numba.njit(cache=True)
    def _control_nb(v, x, off, frac, r, c, lam_h, th1, th2):
        nx, ny = v.shape
        dx = x[1] - x[0]
        alpha = np.zeros((nx, ny))
        viol = np.zeros((nx, ny), dtype=np.bool_)
        for i in range(1, nx):
            d0 = r * x[i]
            for j in range(ny):
                lo = min(i + off[j], nx - 1)
                hi = min(lo + 1, nx - 1)
                jump = (1.0 - frac[j]) * v[lo, j] + frac[j] * v[hi, j] - v[i, j]
                p_f = (v[i + 1, j] - v[i, j]) / dx if i < nx - 1 else 0.0
                den_f = c * (1.0 + p_f) - lam_h * jump
                a_f = _alpha_at(den_f, c, th1, th2)
                if d0 - c * a_f > 0.0:
                    alpha[i, j] = a_f
                    viol[i, j] = den_f <= 0.0 and th1 > 0.0
                    continue
                p_b = (v[i, j] - v[i - 1, j]) / dx
                den_b = c * (1.0 + p_b) - lam_h * jump
                a_b = _alpha_at(den_b, c, th1, th2)
                if d0 - c * a_b < 0.0:
                    alpha[i, j] = a_b
                    viol[i, j] = den_b <= 0.0 and th1 > 0.0
                    continue
                alpha[i, j] = d0 / c if c > 0.0 else a_f
        return alpha, viol

    @numba.njit(cache=True)
    def _apply_xj_nb(v, alpha, x, off, frac, r, c, lam_h):
        nx, ny = v.shape
        dx = x[1] - x[0]
        out = np.zeros((nx, ny))
        for i in range(nx):
            for j in range(ny):
                mu = r * x[i] - c * alpha[i, j]
                acc = 0.0
                if mu > 0.0 and i < nx - 1:
                    acc += mu / dx * (v[i + 1, j] - v[i, j])
                elif mu < 0.0 and i > 0:
                    acc += -mu / dx * (v[i - 1, j] - v[i, j])
                q = lam_h * alpha[i, j]
                if q != 0.0:
                    lo = min(i + off[j], nx - 1)
                    hi = min(lo + 1, nx - 1)
                    acc += q * ((1.0 - frac[j]) * (v[lo, j] - v[i, j]) + frac[j] * (v[hi, j] - v[i, j]))
                out[i, j] = acc
        return out

    @numba.njit(cache=True)
    def _scatter_xj_nb(P, alpha, x, off, frac, r, c, lam_h):
        nx, ny = P.shape
        dx = x[1] - x[0]
        out = np.zeros((nx, ny))
        for i in range(nx):
            for j in range(ny):
                m = P[i, j]
                if m == 0.0:
                    continue
                mu = r * x[i] - c * alpha[i, j]
                if mu > 0.0 and i < nx - 1:
                    f = mu / dx * m
                    out[i, j] -= f
                    out[i + 1, j] += f
                elif mu < 0.0 and i > 0:
                    f = -mu / dx * m
                    out[i, j] -= f
                    out[i - 1, j] += f
                q = lam_h * alpha[i, j] * m
                if q != 0.0:
                    lo = min(i + off[j], nx - 1)
                    hi = min(lo + 1, nx - 1)
                    out[i, j] -= q
                    out[lo, j] += (1.0 - frac[j]) * q
                    out[hi, j] += frac[j] * q
        return out

    @numba.njit(cache=True)
    def _exit_rate_nb(alpha, x, off, frac, r, c, lam_h):
        nx, ny = alpha.shape
        dx = x[1] - x[0]
        rate = np.zeros((nx, ny))
        for i in range(nx):
            for j in range(ny):
                mu = r * x[i] - c * alpha[i, j]
                acc = 0.0
                if mu > 0.0 and i < nx - 1:
                    acc += mu / dx
                elif mu < 0.0 and i > 0:
                    acc += -mu / dx
                lo = min(i + off[j], nx - 1)
                hi = min(lo + 1, nx - 1)
                stay = 0.0
                if lo == i:
                    stay += 1.0 - frac[j]
                if hi == i:
                    stay += frac[j]
                acc += lam_h * alpha[i, j] * (1.0 - stay)
                rate[i, j] = acc
        return rate

    @numba.njit(cache=True)
    def _tridiag_solve_nb(lower, diag, upper, rhs):
        nx, ny = rhs.shape
        cp = np.empty(ny)
        denom = np.empty(ny)
        cp[0] = upper[0] / diag[0]
        denom[0] = diag[0]
        for j in range(1, ny):
            denom[j] = diag[j] - lower[j] * cp[j - 1]
            cp[j] = upper[j] / denom[j] if j < ny - 1 else 0.0
        out = np.empty((nx, ny))
        for i in range(nx):
            out[i, 0] = rhs[i, 0] / denom[0]
            for j in range(1, ny):
                out[i, j] = (rhs[i, j] - lower[j] * out[i, j - 1]) / denom[j]
            for j in range(ny - 2, -1, -1):
                out[i, j] -= cp[j] * out[i, j + 1]
        return out

    @numba.njit(cache=True)
    def _mc_advance_nb(x, b, active, policy, dx, db, r, c, lam_h, k, b_hat, sigma, dt, z, u, x_max, b_max):
        nx, ny = policy.shape
        n = x.shape[0]
        xn = np.empty(n)
        bn = np.empty(n)
        an = np.empty(n, dtype=np.bool_)
        sq = math.sqrt(dt)
        jumps = 0
        for a_idx in range(n):
            xi = x[a_idx]
            bi = b[a_idx]
            alpha = 0.0
            if active[a_idx]:
                sx = min(max(xi / dx, 0.0), nx - 1.0)
                sb = min(max(bi / db, 0.0), ny - 1.0)
                i0 = min(int(math.floor(sx)), nx - 2)
                j0 = min(int(math.floor(sb)), ny - 2)
                fx = sx - i0
                fb = sb - j0
                alpha = (
                    (1 - fx) * (1 - fb) * policy[i0, j0]
                    + fx * (1 - fb) * policy[i0 + 1, j0]
                    + (1 - fx) * fb * policy[i0, j0 + 1]
                    + fx * fb * policy[i0 + 1, j0 + 1]
                )
                if alpha < 0.0:
                    alpha = 0.0
            nxt = xi + (r * xi - c * alpha) * dt
            if u[a_idx] < lam_h * alpha * dt:
                nxt += k * bi
                jumps += 1
            if nxt <= 0.0:
                xn[a_idx] = 0.0
                an[a_idx] = False
            else:
                xn[a_idx] = min(nxt, x_max)
                an[a_idx] = active[a_idx]
            bb = bi + (b_hat - bi) * dt + sigma * sq * z[a_idx]
            bn[a_idx] = min(max(bb, 0.0), b_max)
        return xn, bn, an, jumps


# --------------------------------------------------------------------------- dispatch


def control(v, x, off, frac, r, c, lam_h, th1, th2):
    """Upwind closed-form control and monotonicity-violation mask."""
    if numba_enabled():
        return _control_nb(v, x, off, frac, float(r), float(c), float(lam_h), float(th1), float(th2))
    return _control_np(v, x, off, frac, r, c, lam_h, th1, th2)


def apply_xj(v, alpha, x, off, frac, r, c, lam_h):
    """Wealth-drift plus jump part of the generator applied to v (gather form)."""
    if numba_enabled():
        return _apply_xj_nb(v, alpha, x, off, frac, float(r), float(c), float(lam_h))
    return _apply_xj_np(v, alpha, x, off, frac, r, c, lam_h)


def scatter_xj(P, alpha, x, off, frac, r, c, lam_h):
    """Transpose of ``apply_xj`` acting on cell masses (scatter form)."""
    if numba_enabled():
        return _scatter_xj_nb(P, alpha, x, off, frac, float(r), float(c), float(lam_h))
    return _scatter_xj_np(P, alpha, x, off, frac, r, c, lam_h)


def exit_rate(alpha, x, off, frac, r, c, lam_h):
    """Per-cell total rate of leaving the cell through drift or jumps."""
    if numba_enabled():
        return _exit_rate_nb(alpha, x, off, frac, float(r), float(c), float(lam_h))
    return _exit_rate_np(alpha, x, off, frac, r, c, lam_h)


def tridiag_solve(lower, diag, upper, rhs):
    """Row-batched tridiagonal solve; ``lower[0]`` and ``upper[-1]`` are ignored."""
    if numba_enabled():
        return _tridiag_solve_nb(lower, diag, upper, np.ascontiguousarray(rhs))
    return _tridiag_solve_np(lower, diag, upper, rhs)


def mc_advance(x, b, active, policy, dx, db, r, c, lam_h, k, b_hat, sigma, dt, z, u, x_max, b_max):
    """One Euler-Maruyama step with jump thinning for a block of agents."""
    args = (float(dx), float(db), float(r), float(c), float(lam_h), float(k), float(b_hat), float(sigma), float(dt))
    if numba_enabled():
        return _mc_advance_nb(x, b, active, policy, *args, z, u, float(x_max), float(b_max))
    return _mc_advance_np(x, b, active, policy, *args, z, u, x_max, b_max)
