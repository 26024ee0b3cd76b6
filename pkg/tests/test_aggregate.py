import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from erasure_fl.aggregate import (
    ERROR_FREE,
    MEMORYLESS,
    STALE_REUSE,
    STRATEGIES,
    UpdateCache,
    aggregate_error_free,
    aggregate_memoryless,
    aggregate_stale_reuse,
    applied_weights,
    check_strategy,
)
from erasure_fl.channel import ErasurePattern
from erasure_fl.errors import DimensionError, InvalidConfigError


def as_dict(vectors):
    return {i: np.asarray(v, dtype=float) for i, v in enumerate(vectors)}


def test_equal_updates_are_fixed_point():
    v = np.array([1.5, -2.0, 0.25])
    assert np.array_equal(aggregate_error_free([v, v, v], [3, 7, 11]), v)


def test_midpoint():
    assert np.array_equal(aggregate_error_free([np.array([0.0]), np.array([2.0])], [5, 5]), [1.0])


def test_equal_sizes_give_arithmetic_mean(rng):
    w = rng.normal(size=(3, 8))
    out = aggregate_error_free(list(w), [1000, 1000, 1000])
    assert np.max(np.abs(out - w.mean(axis=0))) < 1e-15


def test_size_weighting():
    out = aggregate_error_free([np.array([0.0]), np.array([4.0])], [3, 1])
    assert out[0] == 1.0


def test_memoryless_all_received_identical_to_error_free(rng):
    w = list(rng.normal(size=(5, 4)))
    sizes = [10, 20, 30, 40, 50]
    pat = ErasurePattern.all_received(5)
    assert np.array_equal(aggregate_memoryless(as_dict(w), pat, sizes, np.zeros(4)), aggregate_error_free(w, sizes))


def test_memoryless_single_survivor():
    w = [np.array([1.0]), np.array([2.0]), np.array([3.0])]
    pat = ErasurePattern.from_bits("010")
    assert np.array_equal(aggregate_memoryless({1: w[1]}, pat, [1, 1, 1], np.zeros(1)), w[1])


def test_memoryless_nothing_received_keeps_previous():
    prev = np.array([0.4, 0.6])
    out = aggregate_memoryless({}, ErasurePattern.from_bits("000"), [1, 1, 1], prev)
    assert np.array_equal(out, prev) and out is not prev


def test_memoryless_renormalizes_over_received():
    w = as_dict([[0.0], [10.0], [100.0]])
    out = aggregate_memoryless(w, ErasurePattern.from_bits("110"), [1, 3, 5], np.zeros(1))
    assert out[0] == pytest.approx(7.5, rel=1e-15)


def test_stale_reuse_all_received_refreshes_cache(rng):
    w = list(rng.normal(size=(4, 3)))
    sizes = [1, 2, 3, 4]
    cache = UpdateCache.initial(4, np.zeros(3))
    out, new = aggregate_stale_reuse(as_dict(w), ErasurePattern.all_received(4), sizes, cache, 5)
    assert np.array_equal(out, aggregate_error_free(w, sizes))
    assert np.array_equal(new.last_seen, np.vstack(w))
    assert list(new.last_round) == [5, 5, 5, 5]


def test_stale_reuse_all_erased_uses_cache():
    cache = UpdateCache(np.array([[1.0], [2.0], [6.0]]), np.array([1, 2, 3]))
    out, new = aggregate_stale_reuse({}, ErasurePattern.from_bits("000"), [1, 1, 2], cache, 9)
    assert out[0] == pytest.approx(3.75, rel=1e-15)
    assert np.array_equal(new.last_seen, cache.last_seen)
    assert np.array_equal(new.last_round, cache.last_round)


def test_stale_reuse_hand_example():
    cache = UpdateCache(np.array([[0.0], [0.0], [3.0]]), np.zeros(3, dtype=int))
    fresh = {0: np.array([1.0]), 1: np.array([2.0])}
    out, new = aggregate_stale_reuse(fresh, ErasurePattern.from_bits("110"), [1, 1, 1], cache, 1)
    # 1/3-weights are inexact in binary, so compare to 2 within rounding
    assert out[0] == pytest.approx(2.0, rel=1e-15, abs=0)
    # oracle: error-free rule on the substituted set
    assert np.array_equal(out, aggregate_error_free([fresh[0], fresh[1], cache.last_seen[2]], [1, 1, 1]))
    assert list(new.last_round) == [1, 1, 0]


def test_cache_is_not_mutated():
    cache = UpdateCache.initial(2, np.zeros(2))
    before = cache.last_seen.copy()
    aggregate_stale_reuse({0: np.ones(2)}, ErasurePattern.from_bits("10"), [1, 1], cache, 1)
    assert np.array_equal(cache.last_seen, before)
    with pytest.raises(ValueError):
        cache.last_seen[0, 0] = 5.0


def test_dimension_errors():
    with pytest.raises(DimensionError):
        aggregate_error_free([np.zeros(2), np.zeros(3)], [1, 1])
    with pytest.raises(DimensionError):
        aggregate_error_free([np.zeros(2)], [1, 1])
    with pytest.raises(DimensionError):
        aggregate_memoryless({0: np.zeros(2)}, ErasurePattern.from_bits("10"), [1, 1], np.zeros(3))
    with pytest.raises(DimensionError):
        aggregate_stale_reuse({0: np.zeros(2)}, ErasurePattern.from_bits("10"), [1, 1], UpdateCache.initial(3, np.zeros(2)))


def test_check_strategy():
    assert check_strategy(STALE_REUSE) == STALE_REUSE
    with pytest.raises(InvalidConfigError):
        check_strategy("fedprox")


patterns = st.lists(st.booleans(), min_size=1, max_size=12)


@settings(max_examples=200, deadline=None)
@given(bits=patterns, sizes_seed=st.integers(0, 2**32 - 1), strategy=st.sampled_from(STRATEGIES))
def test_applied_weights_normalized(bits, sizes_seed, strategy):
    sizes = np.random.default_rng(sizes_seed).integers(1, 1000, size=len(bits))
    pat = ErasurePattern(np.array(bits))
    w = applied_weights(strategy, pat, sizes)
    assert np.all(w >= 0)
    if strategy == MEMORYLESS and not any(bits):
        assert not w.any()
    else:
        assert abs(w.sum() - 1.0) <= 1e-15
    if strategy == MEMORYLESS:
        assert np.all(w[~np.array(bits)] == 0)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 12), p=st.integers(1, 6), seed=st.integers(0, 2**32 - 1))
def test_error_free_equivalence_bit_identical(n, p, seed):
    rng = np.random.default_rng(seed)
    w = list(rng.normal(size=(n, p)) * 10.0 ** rng.integers(-5, 5))
    sizes = list(rng.integers(1, 5000, size=n))
    pat = ErasurePattern.all_received(n)
    ef = aggregate_error_free(w, sizes)
    ml = aggregate_memoryless(as_dict(w), pat, sizes, rng.normal(size=p))
    sr, _ = aggregate_stale_reuse(as_dict(w), pat, sizes, UpdateCache(rng.normal(size=(n, p)), np.zeros(n, dtype=int)))
    assert np.array_equal(ef, ml) and np.array_equal(ef, sr)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 8), rounds=st.integers(1, 15), seed=st.integers(0, 2**32 - 1))
def test_cache_monotone_and_hull(n, rounds, seed):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 100, size=n)
    cache = UpdateCache.initial(n, rng.normal(size=2))
    for t in range(1, rounds + 1):
        fresh = as_dict(rng.normal(size=(n, 2)))
        pat = ErasurePattern(rng.random(n) < 0.5)
        out, new = aggregate_stale_reuse(fresh, pat, sizes, cache, t)
        assert np.all(new.last_round >= cache.last_round)
        for i in range(n):
            if i in pat.received_set:
                assert np.array_equal(new.last_seen[i], fresh[i]) and new.last_round[i] == t
            else:
                assert np.array_equal(new.last_seen[i], cache.last_seen[i])
                assert new.last_round[i] == cache.last_round[i]
        pool = np.vstack([new.last_seen, cache.last_seen])
        assert np.all(out >= pool.min(axis=0) - 1e-12) and np.all(out <= pool.max(axis=0) + 1e-12)
        cache = new


def test_error_free_weights_ignore_pattern():
    pat = ErasurePattern.from_bits("000")
    assert np.array_equal(applied_weights(ERROR_FREE, pat, [1, 1, 2]), [0.25, 0.25, 0.5])
