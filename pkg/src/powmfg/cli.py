"""Command-line interface: ``python -m powmfg <command> ...``.

Exit codes: 0 success, 1 solver non-convergence, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .analysis import (
    DEFAULT_FRACTIONS,
    active_cells_profitable,
    inflation_curve,
    profitability,
    security_report,
)
from .config import RunConfig, config_from_dict, load_config
from .equilibrium import (
    SteadyState,
    initial_alpha_bar,
    solve_steady_state,
    solve_transient,
    steady_coefficients,
)
from .errors import ConfigError, ConvergenceError
from .fokker_planck import DensityState, initial_density, write_density
from .grid import Grid2D, ScalarField, read_field_csv, write_field_csv, write_vector_csv
from .market import fit_exponential, fit_log_revenue, fit_power_law, read_samples
from .montecarlo import (
    PathPoint,
    SimConfig,
    density_distance,
    empirical_density,
    simulate_agents,
    write_snapshot_csv,
)
from .protocol import (
    SECONDS_PER_FORTNIGHT,
    ProtocolParams,
    block_arrival_intensity,
    block_reward,
    cumulative_supply,
    difficulty_from_hashes,
    HashSegment,
    halving_epoch,
    inflation_rate,
    initial_hash_target,
)

log = logging.getLogger("powmfg")

EXIT_OK, EXIT_NONCONVERGED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- run directory


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: Path, obj) -> None:
    _atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def resolve_run_dir(cmd: str, source: str | None, out: str | None) -> Path:
    if out:
        d = Path(out)
    else:
        root = Path(os.environ.get("MFG_RUN_DIR", "runs"))
        stem = Path(source).stem if source else "default"
        d = root / f"{cmd}_{stem}"
    d.mkdir(parents=True, exist_ok=True)
    return d


class Run:
    """Collects output files and writes ``manifest.json`` atomically at the end."""

    def __init__(self, cmd: str, directory: Path, config: RunConfig | None):
        self.cmd = cmd
        self.dir = directory
        self.config = config
        self.files: list[str] = []
        self.started = _now()
        self.convergence: dict = {}

    def add(self, *names: str) -> None:
        for n in names:
            if n not in self.files:
                self.files.append(n)

    def finish(self, status: str) -> None:
        entries = [{"name": n, "sha256": _sha256(self.dir / n)} for n in self.files if (self.dir / n).exists()]
        manifest = {
            "command": self.cmd,
            "version": __version__,
            "backend": kernels.backend(),
            "config": self.config.to_dict() if self.config else None,
            "started": self.started,
            "finished": _now(),
            "files": entries,
            "convergence": self.convergence,
            "status": status,
        }
        _write_json(self.dir / "manifest.json", manifest)


def _config_for(args) -> tuple[RunConfig, str | None]:
    src = getattr(args, "from_manifest", None)
    if src:
        p = Path(src)
        if p.is_dir():
            p = p / "manifest.json"
        if not p.is_file():
            raise ConfigError(f"manifest not found: {p}")
        data = json.loads(p.read_text())
        if not data.get("config"):
            raise ConfigError(f"{p} holds no config snapshot")
        return config_from_dict(data["config"]), str(p.parent)
    if not args.config:
        raise UsageError("a config file (or --from-manifest) is required")
    return load_config(args.config), args.config


# --------------------------------------------------------------------------- protocol


def _protocol_row(n: int, pp: ProtocolParams, nodes: float, hashes: float | None) -> dict:
    k = block_reward(n, pp)
    K = cumulative_supply(n, pp)
    H = initial_hash_target(nodes, pp) if hashes is None else hashes
    lam = block_arrival_intensity(H, H, nodes, pp)
    d = difficulty_from_hashes(HashSegment(0, H), nodes, pp)
    return {
        "blocks": n,
        "epoch": min(halving_epoch(n, pp), pp.max_halvings),
        "reward [token]": k,
        "supply [token]": K,
        "lambda [1/s]": lam,
        "difficulty": d,
        "inflation [1/s]": inflation_rate(k, lam, K),
    }


def cmd_protocol(args) -> int:
    pp = load_config(args.config).protocol if args.config else ProtocolParams()
    if args.blocks is not None:
        if args.blocks < 0:
            raise UsageError("--blocks must be nonnegative")
        counts = [args.blocks]
    else:
        # smallest count reaching each epoch 0..max_halvings
        counts = [-(-pp.halving_blocks * l // pp.retarget_blocks) for l in range(pp.max_halvings + 1)]
    rows = [_protocol_row(n, pp, args.nodes, args.hashes) for n in counts]
    cols = list(rows[0])
    print(",".join(cols))
    for r in rows:
        print(",".join(str(r[c]) if isinstance(r[c], int) else f"{r[c]:.10g}" for c in cols))
    if args.out:
        write_vector_csv(args.out, {c: np.array([r[c] for r in rows], dtype=float) for c in cols})
    return EXIT_OK


# --------------------------------------------------------------------------- steady / transient


def _write_steady(run: Run, st: SteadyState) -> None:
    d = run.dir
    write_field_csv(d / "v_inf.csv", st.v, unit="USD")
    write_field_csv(d / "alpha_inf.csv", st.alpha, unit="TeraHash/fortnight")
    run.add("v_inf.csv", "alpha_inf.csv", *write_density(d, st.m, "m_inf"))


def _steady_summary(st: SteadyState) -> dict:
    return {
        "alpha_bar_inf": st.alpha_bar,
        "coefficients": st.coefficients.__dict__,
        **st.diagnostics,
    }


def cmd_steady(args) -> int:
    cfg, src = _config_for(args)
    run = Run("steady", resolve_run_dir("steady", src, args.out), cfg)
    try:
        st = solve_steady_state(cfg.equilibrium, cfg.protocol, cfg.market, cfg.grid)
    except ConvergenceError as exc:
        _fail(run, exc)
        return EXIT_NONCONVERGED
    _write_steady(run, st)
    run.convergence = {"steady": _steady_summary(st)}
    _write_json(run.dir / "diagnostics.json", run.convergence)
    run.add("diagnostics.json")
    run.finish("ok")
    print(run.dir)
    return EXIT_OK


def _fail(run: Run, exc: ConvergenceError) -> None:
    run.convergence = {"error": str(exc), "residual_history": exc.history}
    _write_json(run.dir / "diagnostics.json", run.convergence)
    run.add("diagnostics.json")
    run.finish("failed")
    log.error("%s", exc)


def cmd_transient(args) -> int:
    cfg, src = _config_for(args)
    run = Run("transient", resolve_run_dir("transient", src, args.out), cfg)
    g = cfg.grid
    m0 = initial_density(g)
    try:
        st = solve_steady_state(cfg.equilibrium, cfg.protocol, cfg.market, g)
        _write_steady(run, st)
        sol = solve_transient(cfg.equilibrium, m0, st, cfg.protocol, cfg.market, g)
    except ConvergenceError as exc:
        _fail(run, exc)
        return EXIT_NONCONVERGED
    d = run.dir
    write_vector_csv(
        d / "alpha_bar.csv", {"t [fortnight]": sol.times, "alpha_bar [TeraHash/fortnight]": sol.alpha_bar_path}
    )
    tab = sol.coefficient_table()
    write_vector_csv(
        d / "path.csv",
        {
            "t [fortnight]": tab["t"],
            "n_nodes": tab["n_nodes"],
            "lambda [1/fortnight]": tab["lambda"],
            "k [token]": tab["k"],
            "supply [token]": tab["supply"],
            "h [TeraHash/fortnight]": tab["h"],
            "b_hat [USD/token]": tab["b_hat"],
            "active_fraction": sol.active_fractions,
            "active_nodes": tab["n_nodes"] * sol.active_fractions,
        },
    )
    cols = {"t [fortnight]": sol.times}
    for i in range(g.nx):
        cols[f"x={i * g.dx:.9g} USD"] = sol.wealth_marginals[:, i]
    write_vector_csv(d / "wealth_marginal.csv", cols)
    run.add("alpha_bar.csv", "path.csv", "wealth_marginal.csv")
    sd = d / "slices"
    sd.mkdir(exist_ok=True)
    for idx, v, m, a in zip(sol.slice_indices, sol.v_path, sol.m_path, sol.alpha_path):
        tag = f"{idx:05d}"
        write_field_csv(sd / f"v_{tag}.csv", v, unit="USD")
        write_field_csv(sd / f"alpha_{tag}.csv", a, unit="TeraHash/fortnight")
        names = write_density(sd, m, f"m_{tag}")
        run.add(f"slices/v_{tag}.csv", f"slices/alpha_{tag}.csv", *(f"slices/{n}" for n in names))
    write_vector_csv(
        sd / "index.csv", {"slice": np.array(sol.slice_indices), "t [fortnight]": sol.times[sol.slice_indices]}
    )
    run.add("slices/index.csv")
    run.convergence = {"steady": _steady_summary(st), "transient": sol.diagnostics}
    _write_json(d / "diagnostics.json", run.convergence)
    run.add("diagnostics.json")
    run.finish("ok")
    print(d)
    return EXIT_OK


# --------------------------------------------------------------------------- simulate


def _read_csv_columns(path: Path) -> tuple[list[str], np.ndarray]:
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def _load_density(directory: Path, tag: str, g: Grid2D) -> DensityState:
    interior = read_field_csv(directory / f"m_{tag}.csv", g)
    _, eta = _read_csv_columns(directory / f"eta_{tag}.csv")
    return DensityState(interior, eta[:, 1])


def cmd_simulate(args) -> int:
    cfg, src = _config_for(args)
    sim = cfg.simulation
    n_agents = args.agents if args.agents is not None else sim.n_agents
    seed = args.seed if args.seed is not None else cfg.seed
    g = cfg.grid
    mp = cfg.market
    run = Run("simulate", resolve_run_dir("simulate", src, args.out), cfg)
    run.convergence = {"n_agents": n_agents, "seed": seed}
    if args.reference:
        ref = Path(args.reference)
        if not (ref / "slices" / "index.csv").is_file() or not (ref / "path.csv").is_file():
            raise ConfigError(f"{ref} is not a transient run directory")
        _, index = _read_csv_columns(ref / "slices" / "index.csv")
        _, path_tab = _read_csv_columns(ref / "path.csv")
        tags = [f"{int(s):05d}" for s in index[:, 0]]
        t_slices = index[:, 1]
        T = float(t_slices[-1]) if sim.T is None else min(sim.T, float(t_slices[-1]))
        schedule = [(t, read_field_csv(ref / "slices" / f"alpha_{tag}.csv", g)) for t, tag in zip(t_slices, tags)]
        m0 = _load_density(ref / "slices", tags[0], g)
        t_grid = path_tab[:, 0]

        def path_at(t, tab=path_tab, tg=t_grid):
            k = int(np.searchsorted(tg, t + 1e-12, side="right") - 1)
            row = tab[max(k, 0)]
            return PathPoint(lambda_t=row[2], k_t=row[3], h_t=row[5], b_hat=row[6])

        sc = SimConfig(n_agents, sim.dt, T, seed=seed, policy=schedule, threads=cfg.threads)
        times = [t for t in t_slices if t <= T + 1e-9]
        res = simulate_agents(sc, mp, path_at, g, m0=m0, snapshot_times=times)
        dists = []
        for snap, tag in zip(res.snapshots, tags):
            ref_state = _load_density(ref / "slices", tag, g)
            dists.append(density_distance(empirical_density(snap, g), ref_state))
        write_vector_csv(
            run.dir / "distances.csv",
            {"t [fortnight]": np.array([s.t for s in res.snapshots]), "tv_distance": np.array(dists)},
        )
        run.add("distances.csv")
        run.convergence["tv_distance"] = dists
    else:
        eq = cfg.equilibrium
        rule = eq.initial_alpha_bar
        abar = max(mp.static_maximizer, eq.alpha_floor) if rule == "steady" else initial_alpha_bar(eq, cfg.protocol, mp)
        co = steady_coefficients(abar, eq, cfg.protocol, mp)
        T = sim.T if sim.T is not None else eq.horizon
        sc = SimConfig(n_agents, sim.dt, T, seed=seed, policy="static", threads=cfg.threads)
        times = list(np.linspace(0.0, T, sim.n_snapshots + 1))
        res = simulate_agents(
            sc, mp, PathPoint(co.lambda_t, co.k_t, co.h_t, co.b_hat), g, m0=initial_density(g), snapshot_times=times
        )
    for i, snap in enumerate(res.snapshots):
        name = f"snapshot_{i:03d}.csv"
        write_snapshot_csv(run.dir / name, snap)
        run.add(name)
    run.convergence["jumps"] = res.jumps
    _write_json(run.dir / "diagnostics.json", run.convergence)
    run.add("diagnostics.json")
    run.finish("ok")
    print(run.dir)
    return EXIT_OK


# --------------------------------------------------------------------------- fit / analyze


FITTERS = {"power": fit_power_law, "exponential": fit_exponential, "log-revenue": fit_log_revenue}


def cmd_fit(args) -> int:
    samples = read_samples(args.data)
    res = FITTERS[args.model](samples)
    text = json.dumps({"model": args.model, **res.to_dict()}, indent=2, default=_json_default)
    print(text)
    if args.out:
        _atomic_write_text(Path(args.out), text + "\n")
    return EXIT_OK


def cmd_analyze(args) -> int:
    rd = Path(args.run_dir)
    if not (rd / "manifest.json").is_file() or not (rd / "path.csv").is_file():
        raise ConfigError(f"{rd} is not a transient run directory")
    cfg = config_from_dict(json.loads((rd / "manifest.json").read_text())["config"])
    _, path_tab = _read_csv_columns(rd / "path.csv")
    _, ab = _read_csv_columns(rd / "alpha_bar.csv")
    times = path_tab[:, 0]
    active = path_tab[:, 8]
    fractions = tuple(args.fractions) if args.fractions else DEFAULT_FRACTIONS
    rep = security_report(times, active, ab[:, 1], cfg.market, fractions)
    out = Path(args.out) if args.out else rd / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / "attack_cost.csv")
    rep.write_json(out / "attack_cost.json")
    write_vector_csv(out / "active_nodes.csv", {"t [fortnight]": times, "active_nodes": active})
    windows = np.floor(times).astype(int)
    lam_per_s = path_tab[:, 2] / SECONDS_PER_FORTNIGHT
    write_vector_csv(
        out / "inflation.csv",
        {"t [fortnight]": times, "windows": windows, "inflation [1/s]": inflation_curve(windows, lam_per_s, cfg.protocol)},
    )
    alpha_inf = read_field_csv(rd / "alpha_inf.csv", cfg.grid)
    summary = {
        "profitability_static_maximizer [USD/fortnight]": profitability(max(cfg.market.static_maximizer, 0.0), cfg.market),
        "profitability_zero [USD/fortnight]": profitability(0.0, cfg.market),
        "active_cells_profitable": active_cells_profitable(alpha_inf, cfg.market),
        "fractions": list(fractions),
    }
    _write_json(out / "summary.json", summary)
    print(out)
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="powmfg", description="Proof-of-Work mining mean field equilibrium toolkit")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("protocol", help="reward, supply, intensity, difficulty and inflation table")
    grp = p.add_mutually_exclusive_group(required=True)
    grp.add_argument("--blocks", type=int, help="retarget-window count N")
    grp.add_argument("--sweep-halvings", action="store_true", help="one row per halving epoch 0..32")
    p.add_argument("--nodes", type=float, default=1.0, help="node count M for difficulty and intensity")
    p.add_argument("--hashes", type=float, default=None, help="hashes per window (default: designed target)")
    p.add_argument("--config", help="optional config file for protocol constants")
    p.add_argument("--out", help="also write the table to this CSV file")
    p.set_defaults(func=cmd_protocol)

    for name, fn, text in (
        ("steady", cmd_steady, "stationary equilibrium"),
        ("transient", cmd_transient, "time-dependent equilibrium path"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("config", nargs="?", help="TOML or JSON config file")
        p.add_argument("--out", help="run directory (default: $MFG_RUN_DIR or ./runs, /<cmd>_<config stem>)")
        p.add_argument("--from-manifest", help="rerun with the config stored in a previous run's manifest")
        p.set_defaults(func=fn)

    p = sub.add_parser("simulate", help="Monte Carlo simulation of individual nodes")
    p.add_argument("config", nargs="?", help="TOML or JSON config file")
    p.add_argument("--agents", type=int, help="number of agents (overrides the config)")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--reference", help="transient run directory to validate against")
    p.add_argument("--out", help="run directory")
    p.add_argument("--from-manifest", help="reuse the config stored in a manifest")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="least-squares parameter fit from a two-column CSV")
    p.add_argument("data", help="CSV with header t,value or alpha,revenue")
    p.add_argument("--model", required=True, choices=sorted(FITTERS))
    p.add_argument("--out", help="write the JSON result here as well")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("analyze", help="active nodes, attack cost and inflation for a transient run")
    p.add_argument("run_dir")
    p.add_argument("--fractions", type=float, nargs="+", help="attacker shares in (0, 1)")
    p.add_argument("--out", help="output directory (default: <run_dir>/analysis)")
    p.set_defaults(func=cmd_analyze)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"powmfg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConvergenceError as exc:
        print(f"powmfg: not converged: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (ValueError, OSError) as exc:
        print(f"powmfg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
