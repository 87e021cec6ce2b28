"""Deterministic counter-based randomness.

All stochastic behaviour in this package flows through :class:`Stream`, a
counter-based SplitMix64 generator. The i-th 64-bit word of a stream with
seed ``s`` is ``mix64((s + (i+1) * GOLDEN) mod 2**64)`` where ``mix64`` is
the SplitMix64 finalizer. Because the word at any counter position is a pure
function of (seed, position), streams are reproducible across platforms and
trivially restartable.

Derived draws, in documented order:

* ``uniform(n)``   -- one word per value; top 53 bits scaled by 2**-53,
  giving doubles in [0, 1).
* ``normal(n)``    -- Box-Muller; each Gaussian consumes TWO uniforms
  (u1, u2) and keeps the cosine branch
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.
* ``integers(n, bound)`` -- ``floor(uniform * bound)``, one uniform each.
* ``choice_without_replacement(n, k)`` -- partial Fisher-Yates over
  [0, n) consuming k uniforms; result order is the draw order.
* ``permutation(n)``  -- full Fisher-Yates, n uniforms.

Per-module seeds come from :func:`derive_seed`, which mixes a root seed with
an integer stream label through the same finalizer.
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64


def mix64(z: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    """SplitMix64 finalizer (wrapping uint64 arithmetic)."""
    with np.errstate(over="ignore"):
        z = np.asarray(z, dtype=np.uint64)
        z = (z ^ (z >> _U64(30))) * _MIX_A
        z = (z ^ (z >> _U64(27))) * _MIX_B
        return z ^ (z >> _U64(31))


def derive_seed(seed: int, stream: int) -> int:
    """Derive an independent child seed for a named sub-stream.

    ``derive_seed(s, k) = mix64((s XOR mix64(k + GOLDEN)) + GOLDEN)``.
    """
    with np.errstate(over="ignore"):
        s = _U64(seed % 2**64)
        k = mix64(_U64(stream % 2**64) + GOLDEN)
        return int(mix64((s ^ k) + GOLDEN))


class Stream:
    """Counter-based SplitMix64 stream of uniforms and Gaussians."""

    def __init__(self, seed: int):
        self.seed = _U64(seed % 2**64)
        self._counter = 0

    def words(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words."""
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return mix64(self.seed + idx * GOLDEN)

    def uniform(self, n: int | None = None) -> np.ndarray | float:
        scalar = n is None
        u = (self.words(1 if scalar else n) >> _U64(11)) * 2.0**-53
        return float(u[0]) if scalar else u

    def normal(self, n: int | None = None) -> np.ndarray | float:
        scalar = n is None
        m = 1 if scalar else n
        u = self.uniform(2 * m)
        u1, u2 = u[0::2], u[1::2]
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        return float(z[0]) if scalar else z

    def integers(self, n: int, bound: int) -> np.ndarray:
        """``n`` integers uniform on [0, bound)."""
        return np.minimum((self.uniform(n) * bound).astype(np.int64), bound - 1)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct integers from [0, n) via partial Fisher-Yates."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} distinct values from range({n})")
        pool = np.arange(n, dtype=np.int64)
        u = self.uniform(k)
        for i in range(k):
            j = i + min(int(u[i] * (n - i)), n - i - 1)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()

    def permutation(self, n: int) -> np.ndarray:
        return self.choice_without_replacement(n, n)
