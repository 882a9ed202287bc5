"""Run configuration: one TOML or JSON file with sections mirroring the parameter records.

Example (TOML)::

    seed = 7
    threads = 1

    [grid]
    nx = 50
    ny = 50

    [market]
    sigma = 0.005

    [protocol]
    fee_floor = 0.0

    [equilibrium]
    n_time_steps = 64

    [simulation]
    n_agents = 1000
    dt = 0.5

Every key is optional; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .equilibrium import EquilibriumConfig
from .errors import ConfigError
from .grid import Grid2D
from .market import MarketParams
from .protocol import ProtocolParams

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class SimulationSection:
    n_agents: int = 1000
    dt: float = 0.5
    # None means: the horizon of the equilibrium section
    T: float | None = None
    n_snapshots: int = 5

    def __post_init__(self):
        if self.n_agents < 1 or not self.dt > 0 or self.n_snapshots < 1:
            raise ConfigError("simulation needs n_agents >= 1, dt > 0 and n_snapshots >= 1")
        if self.T is not None and not self.T > 0:
            raise ConfigError("simulation T must be positive")


@dataclass(frozen=True)
class RunConfig:
    grid: Grid2D = field(default_factory=Grid2D)
    market: MarketParams = field(default_factory=MarketParams)
    protocol: ProtocolParams = field(default_factory=ProtocolParams)
    equilibrium: EquilibriumConfig = field(default_factory=EquilibriumConfig)
    simulation: SimulationSection = field(default_factory=SimulationSection)
    seed: int = 0
    threads: int = 1

    def to_dict(self) -> dict:
        out = {}
        for name in ("grid", "market", "protocol", "equilibrium", "simulation"):
            sec = dataclasses.asdict(getattr(self, name))
            if name == "grid":
                sec = {k: v for k, v in sec.items() if k in ("nx", "ny", "dx", "db")}
            out[name] = sec
        out["seed"] = self.seed
        out["threads"] = self.threads
        return out


_SECTIONS = {
    "grid": Grid2D,
    "market": MarketParams,
    "protocol": ProtocolParams,
    "equilibrium": EquilibriumConfig,
    "simulation": SimulationSection,
}


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"[{section}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    unknown = set(data) - set(_SECTIONS) - {"seed", "threads"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {name: _build(cls, data.get(name, {}), name) for name, cls in _SECTIONS.items()}
    seed = data.get("seed", 0)
    threads = data.get("threads", 1)
    if not isinstance(seed, int) or seed < 0 or seed >= 2**64:
        raise ConfigError("seed must be an integer in [0, 2**64)")
    if not isinstance(threads, int) or threads < 1:
        raise ConfigError("threads must be a positive integer")
    return RunConfig(seed=seed, threads=threads, **kwargs)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        if p.suffix.lower() == ".json":
            data = json.loads(p.read_text())
        elif p.suffix.lower() == ".toml":
            data = tomllib.loads(p.read_text())
        else:
            raise ConfigError(f"config must be .toml or .json, got {p.suffix!r}")
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    return config_from_dict(data)
