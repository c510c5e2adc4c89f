"""
Counter-based random number generator.

Value i of a stream is `mix64(key + (i + 1) * GOLDEN)`, the SplitMix64 output function
applied to a Weyl sequence, where `key` is derived from (seed, stream id). Streams are pure
functions of (seed, stream id, counter), so they reproduce bit-for-bit across runs and
platforms. Gaussian draws use Box-Muller.
"""

import math
from typing import Any, Sequence

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _splitmix(value: int) -> int:
    value = (value + _GOLDEN) & _MASK
    value = ((value ^ (value >> 30)) * _MIX1) & _MASK
    value = ((value ^ (value >> 27)) * _MIX2) & _MASK
    return value ^ (value >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def _count(size: int | Sequence[int] | None) -> int:
    if size is None:
        return 1
    if isinstance(size, int):
        return size
    return int(np.prod(size))


class Rng:
    """Reproducible stream of 64-bit words keyed by (seed, stream id)."""

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK
        self.stream = int(stream) & _MASK
        self.counter = int(counter)
        self._key = _splitmix(_splitmix(self.seed) ^ self.stream)

    def substream(self, stream_id: int) -> "Rng":
        """Independent child stream; does not advance this one."""
        return Rng(self._key, stream_id)

    def bits(self, n: int) -> np.ndarray:
        counters = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self._key) + (counters + np.uint64(1)) * np.uint64(_GOLDEN)
            return _mix_array(z)

    def uniform(self, size: int | Sequence[int] | None = None) -> np.ndarray | float:
        """Uniform draws on [0, 1) with 53-bit resolution."""
        values = (self.bits(_count(size)) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(values[0]) if size is None else values.reshape(size)

    def normal(self, size: int | Sequence[int] | None = None) -> np.ndarray | float:
        n = _count(size)
        pairs = (n + 1) // 2
        u = np.asarray(self.uniform(2 * pairs)).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        theta = 2.0 * math.pi * u[:, 1]
        values = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1).reshape(-1)[:n]
        return float(values[0]) if size is None else values.reshape(size)

    def integers(self, low: int, high: int, size: int | Sequence[int] | None = None):
        """Integers on [low, high)."""
        u = np.asarray(self.uniform(_count(size)))
        values = low + np.floor(u * (high - low)).astype(np.int64)
        values = np.minimum(values, high - 1)
        return int(values[0]) if size is None else values.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(np.asarray(self.uniform(n)), kind="stable")

    def state_dict(self) -> dict[str, Any]:
        return {"seed": self.seed, "stream": self.stream, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict[str, Any]) -> "Rng":
        return cls(state["seed"], state["stream"], state["counter"])

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream}, counter={self.counter})"
