"""Seedable random number generation with deterministic substreams.

Every stochastic component of the toolkit (weight init, message sampling,
distortion parameters, benchmark trials) draws from an ``Rng``. A fixed seed
reproduces the identical value stream across runs and platforms: the backing
generator is PCG64, whose output sequence is fully specified and stable, and
substream derivation is a pure integer mix with no global state.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    """One round of the splitmix64 mixer (public-domain constants)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _mix(seed: int, token: int) -> int:
    return _splitmix64((_splitmix64(seed) ^ token) & _MASK64)


class Rng:
    """A named, seedable generator wrapping numpy's PCG64 bit stream.

    ``child(*tokens)`` derives an independent substream from integer or
    string tokens, so e.g. training step ``t`` can own its private stream
    and a run interrupted at step ``k`` resumes bit-identically.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *tokens) -> "Rng":
        """Derive a deterministic substream keyed by the token path."""
        s = self.seed
        for tok in tokens:
            if isinstance(tok, str):
                tok = int.from_bytes(tok.encode("utf-8")[:8].ljust(8, b"\0"), "little")
            s = _mix(s, int(tok) & _MASK64)
        return Rng(s)

    def uniform(self, lo: float, hi: float, size=None):
        return self._gen.uniform(lo, hi, size=size)

    def normal(self, std: float, size=None):
        return self._gen.normal(0.0, std, size=size)

    def integers(self, lo: int, hi: int, size=None):
        """Uniform integers in [lo, hi)."""
        return self._gen.integers(lo, hi, size=size)

    def bits(self, n: int) -> np.ndarray:
        """n i.i.d. fair bits as an int8 array of 0/1."""
        return self._gen.integers(0, 2, size=n).astype(np.int8)

    def choice(self, n: int) -> int:
        return int(self._gen.integers(0, n))

    def shuffle(self, seq: list) -> None:
        self._gen.shuffle(seq)
