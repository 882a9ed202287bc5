"""Token price, cost and utility model, node growth, and parameter fitting.

Time is measured in fortnights and hashrates in TeraHash per fortnight.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import DomainError, FitError


@dataclass(frozen=True)
class MarketParams:
    theta1: float = 132.82
    theta2: float = 1.19e5
    theta3: float = -1551.86
    unit_cost: float = 8.43e-14
    sigma: float = 0.005
    beta: float = 2.0e4
    discount: float = 7.67e-4
    node_growth_a: float = 6.58e-3
    node_growth_b: float = 4.00

    def __post_init__(self):
        # theta1 = 0 is allowed: it gives a constant utility used in sanity runs
        if self.theta1 < 0 or self.theta2 <= 0:
            raise DomainError("theta1 must be nonnegative and theta2 positive")
        if self.unit_cost < 0 or self.sigma < 0 or self.beta <= 0 or self.discount < 0:
            raise DomainError("invalid cost, volatility, beta or discount")
        if self.node_growth_a <= 0:
            raise DomainError("node_growth_a must be positive")

    @property
    def static_maximizer(self) -> float:
        """Unconstrained argmax of the utility, theta1/c - theta2 (may be negative)."""
        if self.unit_cost == 0:
            return math.inf
        return self.theta1 / self.unit_cost - self.theta2


def production_price(total_hashrate: float, supply: float, p: MarketParams = MarketParams()) -> float:
    """Cost-of-production anchor beta * c * h / K."""
    if supply <= 0:
        raise DomainError("supply must be positive")
    if total_hashrate < 0:
        raise DomainError("total hashrate must be nonnegative")
    return p.beta * p.unit_cost * total_hashrate / supply


def ou_step(b, b_hat, dt, noise, p: MarketParams = MarketParams(), b_max=math.inf):
    """One Euler-Maruyama step of the price, clamped to [0, b_max]."""
    if dt <= 0:
        raise DomainError("dt must be positive")
    nxt = b + (b_hat - b) * dt + p.sigma * math.sqrt(dt) * noise
    return np.clip(nxt, 0.0, b_max) if isinstance(nxt, np.ndarray) else min(max(nxt, 0.0), b_max)


def utility(alpha, p: MarketParams = MarketParams()):
    """Revenue minus cost, theta1*ln(alpha + theta2) + theta3 - c*alpha."""
    a = np.asarray(alpha, dtype=float)
    if np.any(a < 0):
        raise DomainError("alpha must be nonnegative")
    out = p.theta1 * np.log(a + p.theta2) + p.theta3 - p.unit_cost * a
    return float(out) if out.ndim == 0 else out


def cost(alpha, p: MarketParams = MarketParams()):
    a = np.asarray(alpha, dtype=float)
    out = p.unit_cost * a
    return float(out) if out.ndim == 0 else out


def node_count(t, p: MarketParams = MarketParams()):
    """Node population a * t**b, floored at a single node."""
    tt = np.asarray(t, dtype=float)
    if np.any(tt < 0):
        raise DomainError("t must be nonnegative")
    out = np.maximum(1.0, p.node_growth_a * tt**p.node_growth_b)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------- fitting


@dataclass
class FitResult:
    coefficients: np.ndarray
    confidence_halfwidths: np.ndarray
    residual_norm: float
    names: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "coefficients": [float(c) for c in self.coefficients],
            "confidence_halfwidths_95": [float(h) for h in self.confidence_halfwidths],
            "residual_norm": float(self.residual_norm),
        }


def _as_xy(samples) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(samples, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise FitError("need at least two (x, y) samples")
    if not np.all(np.isfinite(arr)):
        raise FitError("samples must be finite")
    return arr[:, 0], arr[:, 1]


def _halfwidths(jac: np.ndarray, resid: np.ndarray, level: float = 0.95) -> np.ndarray:
    n, k = jac.shape
    dof = n - k
    jtj = jac.T @ jac
    if dof <= 0 or np.linalg.matrix_rank(jtj) < k:
        return np.full(k, np.inf)
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(jtj)
    return stats.t.ppf(0.5 + level / 2, dof) * np.sqrt(np.maximum(np.diag(cov), 0.0))


def _linear_fit(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Least squares y = c0 + c1*x; returns (coef, halfwidths, residuals)."""
    if np.ptp(x) == 0:
        raise FitError("abscissae are all equal; slope is not identifiable")
    design = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    return coef, _halfwidths(design, resid), resid


def fit_power_law(samples) -> FitResult:
    """Fit M = a * t**b by least squares on log M = log a + b log t."""
    t, m = _as_xy(samples)
    if np.any(t <= 0) or np.any(m <= 0):
        raise FitError("power-law fit needs positive t and M")
    (log_a, b), (hw_log_a, hw_b), resid = _linear_fit(np.log(t), np.log(m))
    a = math.exp(log_a)
    return FitResult(
        coefficients=np.array([a, b]),
        confidence_halfwidths=np.array([a * hw_log_a, hw_b]),
        residual_norm=float(np.linalg.norm(resid)),
        names=("a", "b"),
    )


def fit_exponential(samples) -> FitResult:
    """Fit log(efficiency) = intercept + rate * t; returns (rate, intercept)."""
    t, e = _as_xy(samples)
    if np.any(e <= 0):
        raise FitError("exponential fit needs positive values")
    (icpt, rate), (hw_i, hw_r), resid = _linear_fit(t, np.log(e))
    return FitResult(
        coefficients=np.array([rate, icpt]),
        confidence_halfwidths=np.array([hw_r, hw_i]),
        residual_norm=float(np.linalg.norm(resid)),
        names=("rate", "log_intercept"),
    )


def _log_revenue_linear(alpha, y, theta2):
    design = np.column_stack([np.log(alpha + theta2), np.ones_like(alpha)])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    return coef, float(resid @ resid)


def fit_log_revenue(samples, max_iter: int = 200, tol: float = 1e-14) -> FitResult:
    """Fit revenue = theta1*ln(alpha + theta2) + theta3.

    theta2 is seeded by a grid search in log space (the model is linear in
    theta1, theta3 once theta2 is fixed), then all three are refined with
    Gauss-Newton in (theta1, ln theta2, theta3) with step halving.
    """
    alpha, y = _as_xy(samples)
    if alpha.size < 3:
        raise FitError("log-revenue fit needs at least three samples")
    if np.any(alpha < 0):
        raise FitError("alpha must be nonnegative")
    scale = max(float(np.max(alpha)), 1.0)
    grid = np.logspace(math.log10(scale) - 12, math.log10(scale) + 3, 301)
    sse = [_log_revenue_linear(alpha, y, th2)[1] for th2 in grid]
    best = int(np.argmin(sse))
    th2 = float(grid[best])
    (th1, th3), _ = _log_revenue_linear(alpha, y, th2)
    z = np.array([th1, math.log(th2), th3])

    def residual(z):
        return y - (z[0] * np.log(alpha + math.exp(z[1])) + z[2])

    def jacobian(z):
        t2 = math.exp(z[1])
        return np.column_stack([np.log(alpha + t2), z[0] * t2 / (alpha + t2), np.ones_like(alpha)])

    r = residual(z)
    cost_now = float(r @ r)
    for _ in range(max_iter):
        jac = jacobian(z)
        step, *_ = np.linalg.lstsq(jac, r, rcond=None)
        lam = 1.0
        improved = False
        while lam > 1e-12:
            trial = z + lam * step
            rt = residual(trial)
            ct = float(rt @ rt)
            if np.isfinite(ct) and ct <= cost_now:
                improved = True
                break
            lam *= 0.5
        if not improved:
            break
        rel = np.max(np.abs(trial - z) / np.maximum(np.abs(z), 1e-300))
        z, r, cost_now = trial, rt, ct
        if rel < tol or cost_now == 0.0:
            break
    th1, th2, th3 = z[0], math.exp(z[1]), z[2]
    jac = np.column_stack([np.log(alpha + th2), th1 / (alpha + th2), np.ones_like(alpha)])
    return FitResult(
        coefficients=np.array([th1, th2, th3]),
        confidence_halfwidths=_halfwidths(jac, r),
        residual_norm=float(np.sqrt(cost_now)),
        names=("theta1", "theta2", "theta3"),
    )


def read_samples(path) -> np.ndarray:
    """Read a two-column CSV (``t,value`` or ``alpha,revenue`` header)."""
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FitError(f"{path}: empty file")
        if len(header) != 2:
            raise FitError(f"{path}: expected two columns, got {header}")
        for line in reader:
            if not line or not "".join(line).strip():
                continue
            try:
                rows.append((float(line[0]), float(line[1])))
            except (ValueError, IndexError) as exc:
                raise FitError(f"{path}: malformed row {line}") from exc
    if len(rows) < 2:
        raise FitError(f"{path}: need at least two samples")
    return np.array(rows)
