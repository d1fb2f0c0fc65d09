"""Counter-based, splittable random number streams.

Every source of randomness in the toolkit is an :class:`RngStream`,
identified by a (seed, stream) pair of 64-bit integers. The pair keys a
Philox counter-based generator, so the value sequence is a pure function
of (seed, stream) and the draw count: reruns reproduce bit-identical
tensors, and distinct streams are statistically independent. Components
that need private randomness (adversary vs. trainer, one bisection
iteration vs. the next) call :meth:`RngStream.split` instead of sharing
a stream.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    """Finalizer used to derive child stream ids; avalanches all 64 bits."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class RngStream:
    """One independent random stream keyed by (seed, stream).

    Not safe to share across concurrent consumers; hand each consumer a
    ``split()`` child instead.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))
        self.draws = 0
        self._children = 0

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream}, draws={self.draws})"

    def split(self) -> "RngStream":
        """Derive a fresh independent stream; deterministic per call order."""
        self._children += 1
        child = _splitmix64(self.stream ^ _splitmix64(self._children))
        return RngStream(self.seed, child)

    def uniform(self, shape, lo: float, hi: float, dtype=np.float32) -> np.ndarray:
        """I.i.d. uniform samples in [lo, hi]."""
        if lo > hi:
            raise ValueError(f"uniform bounds reversed: lo={lo} > hi={hi}")
        shape = tuple(shape)
        scalar = np.dtype(dtype).type
        u = self._gen.random(shape, dtype=dtype)
        self.draws += int(np.prod(shape, dtype=np.int64)) if shape else 1
        return (u * (scalar(hi) - scalar(lo)) + scalar(lo)).astype(dtype, copy=False)

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        """Standard normal samples."""
        shape = tuple(shape)
        z = self._gen.standard_normal(shape, dtype=dtype)
        self.draws += int(np.prod(shape, dtype=np.int64)) if shape else 1
        return z

    def integers(self, lo: int, hi: int, size=None) -> np.ndarray:
        """Uniform integers in [lo, hi)."""
        out = self._gen.integers(lo, hi, size=size)
        self.draws += int(np.size(out))
        return out

    def permutation(self, n: int) -> np.ndarray:
        """A random permutation of range(n)."""
        out = self._gen.permutation(n)
        self.draws += int(n)
        return out
