"""Post-processing of equilibrium output: activity, profitability, attack cost, inflation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError
from .fokker_planck import DensityState
from .grid import ScalarField
from .market import MarketParams, utility
from .protocol import ProtocolParams, block_reward, cumulative_supply, inflation_rate

DEFAULT_FRACTIONS = tuple(round(0.10 + 0.05 * i, 2) for i in range(8))


def active_node_count(state: DensityState, alpha: ScalarField, n_nodes: float) -> float:
    """Nodes spending a positive hashrate: M times the density mass where alpha > 0."""
    P = state.masses()
    return float(n_nodes * P[alpha.values > 0].sum())


def inactive_node_count(state: DensityState, alpha: ScalarField, n_nodes: float) -> float:
    return float(n_nodes - active_node_count(state, alpha, n_nodes))


def profitability(alpha_star, mp: MarketParams = MarketParams()):
    """Per-node utility (revenue minus cost) per fortnight at hashrate ``alpha_star``."""
    return utility(alpha_star, mp)


def attack_cost(fraction: float, n_active: float, alpha_bar: float, mp: MarketParams = MarketParams()) -> float:
    """Fortnightly spend fraction * n_active * c * alpha_bar needed to command ``fraction`` of the network."""
    if not 0.0 < fraction < 1.0:
        raise DomainError("fraction must lie in (0, 1)")
    if n_active < 0 or alpha_bar < 0:
        raise DomainError("n_active and alpha_bar must be nonnegative")
    return fraction * n_active * mp.unit_cost * alpha_bar


def inflation_curve(block_path, intensity_path, pp: ProtocolParams = ProtocolParams()) -> np.ndarray:
    """Inflation rate k * lambda / K along a realised path of block counts."""
    blocks = [int(n) for n in np.asarray(block_path).ravel()]
    lam = np.broadcast_to(np.asarray(intensity_path, dtype=float), (len(blocks),))
    if any(b1 < b0 for b0, b1 in zip(blocks, blocks[1:])):
        raise DomainError("block path must be nondecreasing")
    return np.array(
        [inflation_rate(block_reward(n, pp), float(l), cumulative_supply(n, pp)) for n, l in zip(blocks, lam)]
    )


@dataclass
class SecurityReport:
    times: np.ndarray
    fractions: np.ndarray
    cost_matrix: np.ndarray
    active_nodes: np.ndarray

    def to_rows(self):
        for i, t in enumerate(self.times):
            for j, f in enumerate(self.fractions):
                yield float(t), float(f), float(self.cost_matrix[i, j])

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t [fortnight]", "fraction", "cost [USD/fortnight]"])
            for t, f, c in self.to_rows():
                w.writerow([repr(t), repr(f), repr(c)])

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "fractions": self.fractions.tolist(),
            "cost_matrix": self.cost_matrix.tolist(),
            "active_nodes": self.active_nodes.tolist(),
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def security_report(
    times, active_nodes, alpha_bar_path, mp: MarketParams = MarketParams(), fractions=DEFAULT_FRACTIONS
) -> SecurityReport:
    times = np.asarray(times, dtype=float)
    n_act = np.asarray(active_nodes, dtype=float)
    abar = np.asarray(alpha_bar_path, dtype=float)
    fr = np.asarray(fractions, dtype=float)
    cost = np.array([[attack_cost(f, n, a, mp) for f in fr] for n, a in zip(n_act, abar)])
    return SecurityReport(times, fr, cost, n_act)


def active_cells_profitable(alpha: ScalarField, mp: MarketParams = MarketParams()) -> bool:
    """True when u(alpha) >= u(0) on every cell with alpha > 0."""
    a = alpha.values[alpha.values > 0]
    return bool(np.all(utility(a, mp) >= utility(0.0, mp)))
