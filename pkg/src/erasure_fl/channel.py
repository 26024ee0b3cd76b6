"""Uplink channel model: independent packet-erasure links.

Each device reaches the central node over its own erasure link; a packet is
lost with probability ``eps_i`` independently of every other link and round.
The per-link loss rate for a short packet of ``k`` information bits sent in
``n`` channel uses at linear SNR ``gamma`` is given by the finite-blocklength
normal approximation in :func:`erasure_probability`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from erasure_fl.errors import InvalidConfigError

LOG2_E = math.log2(math.e)


def q_function(x: float) -> float:
    """Gaussian tail probability, Q(x) = erfc(x / sqrt(2)) / 2."""
    return 0.5 * math.erfc(x / math.sqrt(2.0))


@dataclass(frozen=True)
class ShortPacketConfig:
    k: int
    n: int
    gamma: float

    def __post_init__(self) -> None:
        if self.k < 1 or self.n < 1:
            raise InvalidConfigError(f"k and n must be >= 1, got k={self.k}, n={self.n}")
        if not self.gamma > 0:
            raise InvalidConfigError(f"gamma must be > 0, got {self.gamma}")

    @property
    def rate(self) -> float:
        return self.k / self.n

    @property
    def capacity(self) -> float:
        """Shannon capacity log2(1 + gamma) in bits per channel use."""
        return math.log2(1.0 + self.gamma)

    @property
    def dispersion(self) -> float:
        """Channel dispersion V(gamma) = (1 - (1+gamma)^-2) * log2(e)^2."""
        return (1.0 - (1.0 + self.gamma) ** -2) * LOG2_E**2

    def q_argument(self) -> float:
        n = self.n
        return (n * self.capacity - self.k + math.log2(n)) / math.sqrt(n * self.dispersion)


def erasure_probability(cfg: ShortPacketConfig) -> float:
    """Packet error rate of a short packet under the normal approximation.

    Returns Q((n log2(1+gamma) - k + log2 n) / sqrt(n V(gamma))), clamped to
    [0, 1].
    """
    eps = q_function(cfg.q_argument())
    return min(1.0, max(0.0, eps))


@dataclass(frozen=True)
class ErasurePattern:
    """Reception indicators for one round; ``received[i]`` is True when the
    update from device ``i`` reached the central node."""

    received: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.received, dtype=bool).reshape(-1)
        arr.setflags(write=False)
        object.__setattr__(self, "received", arr)

    @classmethod
    def all_received(cls, n_devices: int) -> "ErasurePattern":
        return cls(np.ones(n_devices, dtype=bool))

    @classmethod
    def from_bits(cls, bits: str) -> "ErasurePattern":
        if not bits or set(bits) - {"0", "1"}:
            raise InvalidConfigError(f"pattern bits must be a non-empty 0/1 string, got {bits!r}")
        return cls(np.array([b == "1" for b in bits], dtype=bool))

    @property
    def n_devices(self) -> int:
        return int(self.received.size)

    @property
    def received_set(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.received))

    @property
    def erased_set(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(~self.received))

    @property
    def received_count(self) -> int:
        return int(self.received.sum())

    def bits(self) -> str:
        return "".join("1" if r else "0" for r in self.received)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ErasurePattern):
            return NotImplemented
        return np.array_equal(self.received, other.received)

    def __hash__(self) -> int:
        return hash(self.bits())


@dataclass(frozen=True)
class ErasureChannelSet:
    """Per-device erasure probabilities."""

    epsilons: np.ndarray = field()

    def __post_init__(self) -> None:
        eps = np.array(self.epsilons, dtype=float).reshape(-1)
        if eps.size < 1:
            raise InvalidConfigError("need at least one channel")
        if not np.all(np.isfinite(eps)) or np.any(eps < 0) or np.any(eps > 1):
            raise InvalidConfigError(f"erasure probabilities must lie in [0, 1], got {eps.tolist()}")
        eps.setflags(write=False)
        object.__setattr__(self, "epsilons", eps)

    @classmethod
    def uniform(cls, n_devices: int, epsilon: float) -> "ErasureChannelSet":
        return cls(np.full(n_devices, float(epsilon)))

    @property
    def n_devices(self) -> int:
        return int(self.epsilons.size)

    def common_epsilon(self) -> float:
        """The shared erasure probability; raises if links differ."""
        first = float(self.epsilons[0])
        if not np.all(self.epsilons == first):
            raise InvalidConfigError("this operation requires a common erasure probability on all links")
        return first


def sample_pattern(channels: ErasureChannelSet, rng: np.random.Generator) -> ErasurePattern:
    """Draw one erasure pattern.

    Consumes exactly N uniform doubles from ``rng``; link ``i`` is received
    when its draw ``u_i < 1 - eps_i``.
    """
    u = rng.random(channels.n_devices)
    return ErasurePattern(u < 1.0 - channels.epsilons)


def sample_patterns(channels: ErasureChannelSet, rng: np.random.Generator, count: int) -> np.ndarray:
    """Vectorized equivalent of ``count`` successive :func:`sample_pattern` calls.

    Returns a ``(count, N)`` boolean matrix; the stream consumption and the
    resulting rows match the sequential calls exactly.
    """
    u = rng.random((count, channels.n_devices))
    return u < 1.0 - channels.epsilons
