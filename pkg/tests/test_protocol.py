import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from powmfg.errors import DomainError
from powmfg.protocol import (
    HashSegment,
    ProtocolParams,
    block_arrival_intensity,
    block_reward,
    cumulative_supply,
    difficulty_from_hashes,
    difficulty_retarget,
    halving_epoch,
    inflation_rate,
    initial_hash_target,
    supply_at_epoch,
)


def _halvings_by_loop(n):
    # count epoch boundaries passed, without the floor formula
    scaled, count = 2016 * n, 0
    while scaled >= 210_000 * (count + 1):
        count += 1
    return count


def test_reward_starts_at_fifty():
    assert block_reward(0) == 50.0


def test_reward_tends_to_fee_floor():
    pp = ProtocolParams(fee_floor=0.001)
    assert block_reward(10**9, pp) == 0.001


def test_reward_first_halving_at_105():
    assert _halvings_by_loop(105) == 1
    assert halving_epoch(105) == 1
    assert block_reward(105) == 25.0
    assert block_reward(104) == 50.0


@given(st.integers(0, 10_000))
def test_epoch_matches_loop(n):
    assert halving_epoch(n) == _halvings_by_loop(n)


def test_supply_closed_form_values():
    assert cumulative_supply(0) == 100_800
    assert supply_at_epoch(1) == 10_500_000 + 1680 * 25
    assert supply_at_epoch(1) == 10_542_000


def test_supply_limit():
    assert math.isclose(cumulative_supply(10**7), 2.1e7, rel_tol=1e-6)
    partial = sum(210_000 * 50 / 2**l for l in range(200))
    assert math.isclose(partial, 2.1e7, rel_tol=1e-15)


@given(st.integers(0, 5000), st.integers(0, 5000))
def test_supply_monotone_and_bounded(a, b):
    lo, hi = sorted((a, b))
    assert cumulative_supply(lo) <= cumulative_supply(hi)
    assert cumulative_supply(hi) <= 2.1e7 + 2016 * 50


@given(st.integers(0, 5000), st.integers(0, 5000), st.floats(0, 1))
def test_reward_nonincreasing_and_bounded(a, b, fee):
    pp = ProtocolParams(fee_floor=fee)
    lo, hi = sorted((a, b))
    assert block_reward(lo, pp) >= block_reward(hi, pp) >= fee


def test_retarget():
    assert difficulty_retarget(1.0, 1_209_600) == 1.0
    assert difficulty_retarget(1.0, 604_800) == 2.0
    with pytest.raises(DomainError):
        difficulty_retarget(1.0, 0.0)


@pytest.mark.parametrize("M", [1, 10, 10**3, 10**6])
def test_difficulty_one_at_designed_target(M):
    seg = HashSegment(0, initial_hash_target(M))
    assert math.isclose(difficulty_from_hashes(seg, M), 1.0, rel_tol=1e-9)


def test_difficulty_single_node_closed_form():
    H = 2 * 2016
    assert math.isclose(difficulty_from_hashes(HashSegment(0, H), 1), H / (2016 * 2**32), rel_tol=1e-14)


def test_difficulty_increases_with_hashes():
    d = [difficulty_from_hashes(HashSegment(0, H), 50) for H in (1e6, 2e6, 4e6)]
    assert d[0] < d[1] < d[2]


def test_difficulty_rejects_small_segment():
    with pytest.raises(DomainError):
        HashSegment(0, 2016)


def test_initial_hash_target():
    assert math.isclose(initial_hash_target(1), 2016 * 2**32, rel_tol=1e-9)
    assert math.isclose(initial_hash_target(10**15), 2016, rel_tol=1e-6)
    # the approach is from above; at M = 1e15 it has rounded to 2016 exactly
    assert initial_hash_target(10**15) >= 2016
    assert initial_hash_target(10**9) > 2016
    h = [initial_hash_target(M) for M in (1, 10, 100)]
    assert h[0] > h[1] > h[2]
    with pytest.raises(DomainError):
        initial_hash_target(0)


@given(st.floats(2017, 1e30), st.floats(1, 1e15))
def test_intensity_equal_segments_is_exact(H, M):
    assert block_arrival_intensity(H, H, M) == 1 / 600


def test_intensity_single_node_ratio():
    assert math.isclose(block_arrival_intensity(1e6, 2e6, 1), 1 / 300, rel_tol=1e-12)


def test_inflation():
    assert math.isclose(inflation_rate(50, 1 / 600, 100_800), 50 / (600 * 100_800), rel_tol=1e-15)
    assert inflation_rate(0.0, 1.0, 2.1e7) == 0.0
    rates = [inflation_rate(50 * 0.5**l, 1 / 600, supply_at_epoch(l)) for l in range(3)]
    assert rates[0] > rates[1] > rates[2]
    with pytest.raises(DomainError):
        inflation_rate(1.0, 1.0, 0.0)


def test_params_validation():
    with pytest.raises(DomainError):
        ProtocolParams(fee_floor=2.0)
    with pytest.raises(DomainError):
        ProtocolParams(retarget_blocks=0)
