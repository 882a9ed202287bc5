"""Proof-of-Work reward arithmetic: difficulty, block intensity, reward, supply.

All functions are pure. Counts are integers, money is in tokens, and the
block intensity is returned in blocks per second.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DomainError

SECONDS_PER_FORTNIGHT = 1_209_600
TWO_POW_32 = 2**32


@dataclass(frozen=True)
class ProtocolParams:
    retarget_blocks: int = 2016
    halving_blocks: int = 210_000
    base_reward: float = 50.0
    fee_floor: float = 0.0
    max_halvings: int = 32
    target_block_seconds: float = 600.0
    two_pow_32: int = TWO_POW_32

    def __post_init__(self):
        for name in ("retarget_blocks", "halving_blocks", "max_halvings"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")
        if self.target_block_seconds <= 0:
            raise DomainError("target_block_seconds must be positive")
        if self.base_reward <= 0:
            raise DomainError("base_reward must be positive")
        if not 0.0 <= self.fee_floor <= 1.0:
            raise DomainError("fee_floor must lie in [0, 1]")

    @property
    def blocks_per_fortnight(self) -> float:
        """Target block rate expressed per fortnight (2016 with the defaults)."""
        return SECONDS_PER_FORTNIGHT / self.target_block_seconds

    @property
    def supply_limit(self) -> float:
        """Limit of the halving series, sum_l halving_blocks * base_reward / 2**l."""
        return 2.0 * self.halving_blocks * self.base_reward


@dataclass(frozen=True)
class HashSegment:
    """Aggregate hashes over one retarget window."""

    index: int
    total_hashes: float
    elapsed: float = float(SECONDS_PER_FORTNIGHT)

    def __post_init__(self):
        if not self.total_hashes > 2016:
            raise DomainError(f"segment {self.index}: total hashes must exceed the retarget window")


def halving_epoch(blocks_found: int, params: ProtocolParams = ProtocolParams()) -> int:
    """Epoch index floor(retarget_blocks * N / halving_blocks), uncapped.

    The count is scaled by the retarget window before dividing, so ``N``
    effectively counts retarget segments.
    """
    if blocks_found < 0:
        raise DomainError("blocks_found must be nonnegative")
    return (params.retarget_blocks * int(blocks_found)) // params.halving_blocks


def block_reward(blocks_found: int, params: ProtocolParams = ProtocolParams()) -> float:
    """Tokens minted per block at count ``blocks_found``; the fee floor past the last halving."""
    epoch = halving_epoch(blocks_found, params)
    if epoch >= params.max_halvings:
        return params.fee_floor
    return params.base_reward * 0.5**epoch + params.fee_floor


def supply_at_epoch(epoch: int, params: ProtocolParams = ProtocolParams()) -> float:
    """Closed-form circulating supply for halving epoch ``epoch``."""
    if epoch < 0:
        raise DomainError("epoch must be nonnegative")
    half_l = 0.5**epoch
    minted = params.halving_blocks * params.base_reward * (1.0 - half_l) / 0.5
    # exact integer modulo; the closed form is integer valued
    headroom = params.retarget_blocks - (params.halving_blocks * epoch) % params.retarget_blocks
    return minted + headroom * params.base_reward * half_l


def cumulative_supply(blocks_found: int, params: ProtocolParams = ProtocolParams()) -> float:
    epoch = min(halving_epoch(blocks_found, params), params.max_halvings)
    return supply_at_epoch(epoch, params)


def difficulty_retarget(d_prev: float, elapsed: float, params: ProtocolParams = ProtocolParams()) -> float:
    """Difficulty after a retarget window that took ``elapsed`` seconds."""
    if elapsed <= 0:
        raise DomainError("elapsed must be positive")
    if d_prev <= 0:
        raise DomainError("d_prev must be positive")
    window = params.retarget_blocks * params.target_block_seconds
    return window * d_prev / elapsed


def _one_minus_root(total_hashes: float, n_nodes: float, window: int = 2016) -> float:
    # 1 - (1 - window/H)**(1/M) without cancellation for large M
    if not total_hashes > window:
        raise DomainError(f"total hashes {total_hashes!r} must exceed {window}")
    if n_nodes < 1:
        raise DomainError("node count must be at least 1")
    return -math.expm1(math.log1p(-window / total_hashes) / n_nodes)


def initial_hash_target(n_nodes: float, params: ProtocolParams = ProtocolParams()) -> float:
    """Hashes per window that make the initial difficulty equal to one."""
    if n_nodes < 1:
        raise DomainError("node count must be at least 1")
    p_solve = -math.expm1(n_nodes * math.log1p(-1.0 / params.two_pow_32))
    return params.retarget_blocks / p_solve


def difficulty_from_hashes(seg: HashSegment, n_nodes: float, params: ProtocolParams = ProtocolParams()) -> float:
    q = _one_minus_root(seg.total_hashes, n_nodes, params.retarget_blocks)
    return 1.0 / (params.two_pow_32 * q)


def block_arrival_intensity(
    h_prev: float, h_cur: float, n_nodes: float, params: ProtocolParams = ProtocolParams()
) -> float:
    """Block rate (per second) over a window following one with ``h_prev`` hashes."""
    ratio = _one_minus_root(h_prev, n_nodes, params.retarget_blocks) / _one_minus_root(
        h_cur, n_nodes, params.retarget_blocks
    )
    return ratio / params.target_block_seconds


def inflation_rate(reward: float, intensity: float, supply: float) -> float:
    if supply <= 0:
        raise DomainError("supply must be positive")
    return reward * intensity / supply
