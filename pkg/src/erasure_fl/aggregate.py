"""Global aggregation at the central node.

All three rules reduce to a weighted mean over one parameter vector per
contributing device and share :func:`weighted_mean`, so that with every
update received they produce bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from erasure_fl.channel import ErasurePattern
from erasure_fl.errors import DimensionError, InvalidConfigError

ERROR_FREE = "error-free"
MEMORYLESS = "memoryless"
STALE_REUSE = "stale-reuse"
STRATEGIES = (ERROR_FREE, MEMORYLESS, STALE_REUSE)


def check_strategy(name: str) -> str:
    if name not in STRATEGIES:
        raise InvalidConfigError(f"unknown strategy {name!r}; expected one of {', '.join(STRATEGIES)}")
    return name


def pairwise_sum(rows: np.ndarray) -> np.ndarray:
    """Sum the rows of a 2-D array by recursive halving."""
    n = rows.shape[0]
    if n == 1:
        return rows[0].copy()
    if n == 2:
        return rows[0] + rows[1]
    mid = n // 2
    return pairwise_sum(rows[:mid]) + pairwise_sum(rows[mid:])


def weighted_mean(vectors: Sequence[np.ndarray], sizes: Sequence[float]) -> np.ndarray:
    """``sum_i (sizes_i / sum(sizes)) * vectors_i`` in a fixed evaluation order."""
    if len(vectors) == 0:
        raise InvalidConfigError("weighted mean of an empty set")
    stacked = np.vstack([np.asarray(v, dtype=float) for v in vectors])
    if stacked.shape[0] != len(vectors):
        raise DimensionError("all parameter vectors must be one-dimensional")
    weights = np.asarray(sizes, dtype=float)
    if weights.shape != (stacked.shape[0],):
        raise DimensionError(f"{stacked.shape[0]} vectors but {weights.size} weights")
    weights = weights / weights.sum()
    return pairwise_sum(weights[:, None] * stacked)


def _check_dims(vectors: Sequence[np.ndarray]) -> None:
    lengths = {np.asarray(v).shape for v in vectors}
    if len(lengths) > 1:
        raise DimensionError(f"parameter vectors have different shapes: {sorted(lengths)}")


def aggregate_error_free(updates: Sequence[np.ndarray], sizes: Sequence[float]) -> np.ndarray:
    """FedAvg: ``(1/D) * sum_i D_i w_i`` over all devices."""
    if len(updates) != len(sizes):
        raise DimensionError(f"{len(updates)} updates for {len(sizes)} devices")
    _check_dims(updates)
    return weighted_mean(updates, sizes)


def aggregate_memoryless(
    updates: Mapping[int, np.ndarray],
    pattern: ErasurePattern,
    sizes: Sequence[float],
    previous_global: np.ndarray,
) -> np.ndarray:
    """Average the received updates only, renormalized over the received set.

    With nothing received the previous global parameter is kept.
    ``updates`` must contain (at least) every received device.
    """
    received = pattern.received_set
    if not received:
        return np.array(previous_global, dtype=float)
    vecs = [updates[i] for i in received]
    _check_dims(vecs + [previous_global])
    return weighted_mean(vecs, [sizes[i] for i in received])


@dataclass(frozen=True, eq=False)
class UpdateCache:
    """Last update the central node received from each device.

    ``last_seen[i]`` is device i's most recently received parameter vector
    (the global initialization before the first reception) and
    ``last_round[i]`` the round it arrived in (0 for the initialization).
    """

    last_seen: np.ndarray
    last_round: np.ndarray

    def __post_init__(self) -> None:
        seen = np.array(self.last_seen, dtype=float)
        rounds = np.array(self.last_round, dtype=np.int64)
        if seen.ndim != 2 or rounds.shape != (seen.shape[0],):
            raise DimensionError("cache needs an (N, p) parameter matrix and N round indices")
        seen.setflags(write=False)
        rounds.setflags(write=False)
        object.__setattr__(self, "last_seen", seen)
        object.__setattr__(self, "last_round", rounds)

    @classmethod
    def initial(cls, n_devices: int, w0: np.ndarray) -> "UpdateCache":
        w0 = np.asarray(w0, dtype=float)
        return cls(np.tile(w0, (n_devices, 1)), np.zeros(n_devices, dtype=np.int64))

    @property
    def n_devices(self) -> int:
        return int(self.last_seen.shape[0])

    def refreshed(self, updates: Mapping[int, np.ndarray], devices: Sequence[int], round_index: int) -> "UpdateCache":
        seen = self.last_seen.copy()
        rounds = self.last_round.copy()
        for i in devices:
            seen[i] = updates[i]
            rounds[i] = max(rounds[i], round_index)
        return UpdateCache(seen, rounds)


def aggregate_stale_reuse(
    updates: Mapping[int, np.ndarray],
    pattern: ErasurePattern,
    sizes: Sequence[float],
    cache: UpdateCache,
    round_index: int = 0,
) -> tuple[np.ndarray, UpdateCache]:
    """Fill in erased devices with their cached update, then FedAvg.

    Returns the global parameter and a new cache in which only the received
    devices were refreshed (stamped with ``round_index``).
    """
    if cache.n_devices != pattern.n_devices or len(sizes) != pattern.n_devices:
        raise DimensionError("cache, pattern and sizes must cover the same devices")
    vecs = [updates[i] if r else cache.last_seen[i] for i, r in enumerate(pattern.received)]
    _check_dims(vecs + [cache.last_seen[0]])
    w = weighted_mean(vecs, sizes)
    return w, cache.refreshed(updates, pattern.received_set, round_index)


def applied_weights(strategy: str, pattern: ErasurePattern, sizes: Sequence[float]) -> np.ndarray:
    """Per-device weights a strategy puts on each device's contribution
    (fresh or cached). All zeros only for memoryless with nothing received."""
    sizes = np.asarray(sizes, dtype=float)
    if check_strategy(strategy) == MEMORYLESS:
        mask = pattern.received.astype(float)
        total = float((sizes * mask).sum())
        return sizes * mask / total if total > 0 else np.zeros_like(sizes)
    return sizes / sizes.sum()
