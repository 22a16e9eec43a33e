"""SplitMix64 random stream with a fixed mapping to floats.

The output mapping is part of the contract so that datasets can be regenerated
bit-for-bit on any platform:

* ``next_u64``: ``state += 0x9E3779B97F4A7C15``, then the SplitMix64 mixer.
* ``uniform``: ``(u64 >> 11) * 2**-53``, in ``[0, 1)``.
* ``normal``: Box-Muller from two consecutive uniforms ``u1, u2`` as
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``; the sine branch is discarded.
* ``integers(n)``: ``floor(uniform * n)``.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Seedable SplitMix64 generator; vectorised draws advance the state exactly
    as the equivalent number of scalar draws would."""

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def _raw(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            out = _mix(z)
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def next_u64(self) -> int:
        return int(self._raw(1)[0])

    def uniform(self, size: int | tuple | None = None) -> float | np.ndarray:
        n = 1 if size is None else int(np.prod(size))
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size: int | tuple | None = None) -> float | np.ndarray:
        n = 1 if size is None else int(np.prod(size))
        u = self.uniform(2 * n).reshape(n, 2)
        z = np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, n: int, size: int | tuple | None = None) -> int | np.ndarray:
        if n <= 0:
            raise ValueError("integers() needs n >= 1")
        u = self.uniform(size)
        if size is None:
            return min(int(u * n), n - 1)
        return np.minimum((u * n).astype(np.int64), n - 1)

    def choice(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), via a partial Fisher-Yates shuffle."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        idx = np.arange(n)
        for i in range(k):
            j = i + self.integers(n - i)
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:k].copy()

    def spawn(self, *keys: int) -> "Rng":
        """Independent child stream keyed on this generator's seed state and ``keys``."""
        s = self.state
        for k in keys:
            z = np.array([(s ^ (int(k) * GAMMA)) & MASK64], dtype=np.uint64)
            with np.errstate(over="ignore"):
                s = int(_mix(z)[0])
        return Rng(s)
