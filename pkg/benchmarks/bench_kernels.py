"""Compare the numba and numpy backends of the hot kernels.

    python benchmarks/bench_kernels.py [--nx 200 --ny 220 --agents 100000 --repeat 20]
"""

from __future__ import annotations

import argparse
import os
import time

import numpy as np

from powmfg import kernels
from powmfg.grid import Grid2D, jump_shift


def _time(fn, repeat: int) -> float:
    fn()  # warm-up (and JIT compile)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--nx", type=int, default=200)
    ap.add_argument("--ny", type=int, default=220)
    ap.add_argument("--agents", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    g = Grid2D(args.nx, args.ny, 1.0, 1.0)
    rng = np.random.default_rng(0)
    v = np.cumsum(rng.random(g.shape), axis=0)
    alpha = rng.random(g.shape)
    alpha[0] = 0.0
    P = rng.random(g.shape)
    P /= P.sum()
    off, frac = jump_shift(0.3, g)
    x = g.x
    r, c, lam_h = 0.01, 0.05, 0.2
    ny = g.ny
    lower = np.full(ny, -0.1)
    upper = np.full(ny, -0.1)
    diag = np.full(ny, 1.2)
    n = args.agents
    ax = rng.uniform(0, g.x_max, n)
    ab = rng.uniform(0, g.b_max, n)
    act = np.ones(n, dtype=bool)
    z = rng.standard_normal(n)
    u = rng.random(n)

    cases = {
        "control": lambda: kernels.control(v, x, off, frac, r, c, lam_h, 1.0, 0.5),
        "apply_xj": lambda: kernels.apply_xj(v, alpha, x, off, frac, r, c, lam_h),
        "scatter_xj": lambda: kernels.scatter_xj(P, alpha, x, off, frac, r, c, lam_h),
        "exit_rate": lambda: kernels.exit_rate(alpha, x, off, frac, r, c, lam_h),
        "tridiag_solve": lambda: kernels.tridiag_solve(lower, diag, upper, v),
        "mc_advance": lambda: kernels.mc_advance(
            ax, ab, act, alpha, g.dx, g.db, r, c, lam_h, 0.3, 10.0, 1.0, 0.05, z, u, g.x_max, g.b_max
        ),
    }
    print(f"grid {g.nx}x{g.ny}, {n} agents, best of {args.repeat}")
    print(f"{'kernel':<14}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for name, fn in cases.items():
        os.environ.pop("MFG_DISABLE_NUMBA", None)
        t_nb = _time(fn, args.repeat) if kernels.numba_enabled() else float("nan")
        os.environ["MFG_DISABLE_NUMBA"] = "1"
        t_np = _time(fn, args.repeat)
        os.environ.pop("MFG_DISABLE_NUMBA", None)
        print(f"{name:<14}{1e3 * t_nb:>12.3f}{1e3 * t_np:>12.3f}{t_np / t_nb:>10.1f}")


if __name__ == "__main__":
    main()
