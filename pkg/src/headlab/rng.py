"""Deterministic random streams built on the SplitMix64 finalizer.

Every stochastic piece of the package draws from :class:`SplitMix64` so that
runs are reproducible bit-for-bit from a single 64-bit seed, independent of
numpy version or platform.  The generator is counter-based: output ``i`` is
``finalize(seed + (i + 1) * GOLDEN)`` modulo 2**64, which lets us vectorise
arbitrarily large draws without carrying mutable numpy state around.

Layout of derived quantities:

* uniforms take the top 53 bits of the mixed word, giving values in [0, 1);
  the variant used for Box-Muller radii adds one ulp so the log is finite.
* normals come from Box-Muller pairs: uniforms ``2k`` and ``2k + 1`` form
  ``(r cos theta, r sin theta)`` with ``r = sqrt(-2 ln u1)`` and
  ``theta = 2 pi u2``; outputs are interleaved and truncated to the
  requested length.
"""

from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U64_GOLDEN = np.uint64(GOLDEN)
_U64_MIX1 = np.uint64(_MIX1)
_U64_MIX2 = np.uint64(_MIX2)


def finalize64(x: int) -> int:
    """SplitMix64 finalizer on a Python int, modulo 2**64."""
    x &= MASK64
    x = ((x ^ (x >> 30)) * _MIX1) & MASK64
    x = ((x ^ (x >> 27)) * _MIX2) & MASK64
    return x ^ (x >> 31)


def mix64(*values: int) -> int:
    """Fold any number of integers into one well-scrambled 64-bit seed.

    The fold is ``h <- finalize64(h + GOLDEN + v)`` over the values in order,
    starting from ``h = 0``.  Negative inputs are reduced modulo 2**64 first.
    Order matters: ``mix64(a, b) != mix64(b, a)`` in general, which is what we
    want when deriving per-(prompt, seed) streams from a global seed.
    """
    h = 0
    for v in values:
        h = finalize64((h + GOLDEN + (int(v) & MASK64)) & MASK64)
    return h


def _finalize_array(x: np.ndarray) -> np.ndarray:
    # Same bit dance as finalize64, on a uint64 array (wraps silently).
    x = (x ^ (x >> np.uint64(30))) * _U64_MIX1
    x = (x ^ (x >> np.uint64(27))) * _U64_MIX2
    return x ^ (x >> np.uint64(31))


class SplitMix64:
    """Counter-based stream of uniforms and normals from one 64-bit seed."""

    def __init__(self, seed: int):
        self._seed = int(seed) & MASK64
        self._counter = 0

    @property
    def counter(self) -> int:
        """Number of raw 64-bit words consumed so far."""
        return self._counter

    def _raw(self, n: int) -> np.ndarray:
        if n < 0:
            raise ValueError("draw count must be non-negative")
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _finalize_array(np.uint64(self._seed) + idx * _U64_GOLDEN)

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1), each using the top 53 bits of one word."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normals(self, n: int) -> np.ndarray:
        """``n`` standard normals via Box-Muller on consecutive uniforms."""
        pairs = (n + 1) // 2
        raw = self._raw(2 * pairs)
        bits = (raw >> np.uint64(11)).astype(np.float64)
        u1 = (bits[0::2] + 1.0) * 2.0**-53  # (0, 1], keeps the log finite
        u2 = bits[1::2] * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def integers(self, n: int, bound: int) -> np.ndarray:
        """``n`` ints in [0, bound) by scaling uniforms (fine for shuffles)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return np.minimum((self.uniforms(n) * bound).astype(np.int64), bound - 1)

    def shuffled(self, n: int) -> np.ndarray:
        """A permutation of ``range(n)`` via seeded Fisher-Yates."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = int(self.integers(1, i + 1)[0])
            perm[i], perm[j] = perm[j], perm[i]
        return perm
