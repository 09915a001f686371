"""Deterministic random number generation.

The generator is splitmix64: 64-bit state advanced by a fixed odd constant
(the golden gamma), output produced by a finalizing mix. It is chosen for its
trivial, exactly reproducible arithmetic; the whole framework's determinism
contract rests on this module. The counter-based form means a block of n draws
can be produced vectorized without changing the stream.

Draw accounting (fixed, so consumption is independent of call shapes):
  * one u64 per uniform,
  * one u64 per bounded integer,
  * two u64 per Gaussian (Box-Muller, cosine branch only, no spare caching).

Streams are split by label from the seed the Rng was *constructed* with, not
from its current position, so the stream tree depends only on the root seed.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_INV53 = float(2.0**-53)


def _mix_array(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer on uint64 arrays; numpy uint64 arithmetic wraps mod 2^64
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _mix_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _fnv1a64(label: str) -> int:
    h = 0xCBF29CE484222325
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    return h


class Rng:
    """splitmix64 stream with deterministic label-based splitting."""

    __slots__ = ("seed", "state")

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        self.state = self.seed

    def split(self, label: str) -> "Rng":
        """Child stream derived from this Rng's seed and a label.

        Independent of how many draws this Rng has made; the same label always
        yields the same child.
        """
        return Rng(_mix_int(self.seed ^ _fnv1a64(label)))

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK
        return _mix_int(self.state)

    def _u64_block(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
        block = _mix_array(np.uint64(self.state) + steps)
        self.state = (self.state + n * _GAMMA) & _MASK
        return block

    def uniform01(self) -> float:
        """One uniform draw in [0, 1) with 53-bit resolution."""
        return (self.next_u64() >> 11) * _INV53

    def uniforms(self, n: int) -> np.ndarray:
        """n uniform draws in [0, 1)."""
        return ((self._u64_block(n) >> np.uint64(11)).astype(np.float64)) * _INV53

    def gaussian(self, shape) -> np.ndarray:
        """Standard normal array via Box-Muller, two u64 draws per value."""
        n = int(np.prod(shape)) if shape else 1
        if n == 0:
            return np.zeros(shape, dtype=np.float64)
        u = self.uniforms(2 * n)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(shape)

    def category(self, lo: int, hi: int) -> int:
        """One integer uniform on {lo..hi} inclusive."""
        return int(self.categories(1, lo, hi)[0])

    def categories(self, n: int, lo: int, hi: int) -> np.ndarray:
        """n integers uniform on {lo..hi} inclusive, one u64 each.

        The clamp is defensive: u53 < 1 strictly, so floor(u53 * span) should
        never reach span, but the bound must hold even if the product rounds up.
        """
        if hi < lo:
            raise ValueError(f"empty integer range [{lo}, {hi}]")
        span = hi - lo + 1
        idx = np.floor(self.uniforms(n) * span).astype(np.int64)
        np.minimum(idx, span - 1, out=idx)
        return lo + idx
