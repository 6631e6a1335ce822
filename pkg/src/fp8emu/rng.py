"""Counter-based random streams for stochastic rounding.

Every draw is a pure function of ``(seed, key..., counter)``, so results do
not depend on evaluation order or on how work is split between threads.
The mixing function is SplitMix64's finalizer; a stream key is folded one
component at a time and the 32 high bits of the final hash form the draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int (bijective on 64 bits)."""
    z = (z + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def derive(key: int, component: int) -> int:
    return mix64((key ^ mix64(component & MASK64)) & MASK64)


def mix64_array(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def derive_array(key: int, components: np.ndarray) -> np.ndarray:
    return mix64_array(np.uint64(key) ^ mix64_array(components))


@dataclass(frozen=True)
class RngStream:
    """A value-like, splittable source of uniform draws on [0, 1).

    >>> s = RngStream(7).split(3, 0)
    >>> s.uniform_at(5) == s.uniform_at(5)
    True
    """

    seed: int
    key: tuple[int, ...] = ()
    _key64: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        k = mix64(self.seed & MASK64)
        for c in self.key:
            k = derive(k, c)
        object.__setattr__(self, "_key64", k)

    @property
    def key64(self) -> int:
        return self._key64

    def split(self, *components: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(int(c) for c in components))

    def bits32_at(self, counter: int) -> int:
        return derive(self._key64, counter) >> 32

    def uniform_at(self, counter: int) -> float:
        return self.bits32_at(counter) * 2.0**-32

    def uniform(self, counters) -> np.ndarray:
        """Vectorized draws for an array of counters (any integer shape)."""
        c = np.asarray(counters, dtype=np.uint64)
        h = derive_array(self._key64, c)
        return (h >> np.uint64(32)).astype(np.float64) * 2.0**-32

    def uniform_n(self, n: int) -> np.ndarray:
        return self.uniform(np.arange(n, dtype=np.uint64))

    def generator(self) -> np.random.Generator:
        """A numpy Generator seeded from this stream (for data/init sampling)."""
        return np.random.Generator(np.random.Philox(key=self._key64))
