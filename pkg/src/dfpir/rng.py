"""Seeded random streams: SplitMix64 seed expansion feeding xoshiro256**.

Every stream is keyed by ``(seed, purpose, index)`` so that any consumer
(parameter init, batch sampling, evaluation sets) can be regenerated
independently of what else ran before it. Draws are vectorized over a fixed
number of independent xoshiro lanes; for a given key and lane count the
output sequence is fully determined.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

_U64 = np.uint64


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step on a Python int. Returns (new_state, output)."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def stream_key(seed: int, purpose: str, index: int = 0) -> int:
    """Mix (seed, purpose, index) into a single 64-bit stream key."""
    _, a = splitmix64(seed & _MASK64)
    _, b = splitmix64(a ^ zlib.crc32(purpose.encode("utf-8")))
    _, c = splitmix64(b ^ (index & _MASK64))
    return c


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << _U64(k)) | (x >> _U64(64 - k))


class Rng:
    """xoshiro256** generator running ``lanes`` independent states in lockstep."""

    def __init__(self, seed: int, purpose: str = "", index: int = 0, lanes: int = 256):
        if lanes < 1:
            raise ValueError("lanes must be >= 1")
        self.lanes = lanes
        sm = stream_key(seed, purpose, index)
        words = []
        for _ in range(4 * lanes):
            sm, out = splitmix64(sm)
            words.append(out)
        self._s = np.array(words, dtype=_U64).reshape(lanes, 4).T.copy()
        if not self._s.any(axis=0).all():  # all-zero state is a fixed point
            raise RuntimeError("degenerate xoshiro state")

    def _step(self) -> np.ndarray:
        s = self._s
        with np.errstate(over="ignore"):
            result = _rotl(s[1] * _U64(5), 7) * _U64(9)
            t = s[1] << _U64(17)
            s[2] ^= s[0]
            s[3] ^= s[1]
            s[1] ^= s[2]
            s[0] ^= s[3]
            s[2] ^= t
            s[3] = _rotl(s[3], 45)
        return result

    def next_u64(self, n: int) -> np.ndarray:
        """n raw 64-bit outputs, lane-interleaved (step-major)."""
        steps = -(-n // self.lanes)
        out = np.empty((steps, self.lanes), dtype=_U64)
        for i in range(steps):
            out[i] = self._step()
        return out.ravel()[:n]

    def random(self, size=None) -> np.ndarray | float:
        """Uniform doubles in [0, 1) from the top 53 bits."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> _U64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return float(u[0]) if size is None else u.reshape(size)

    def uniform(self, low: float, high: float, size=None):
        u = self.random(size)
        return low + (high - low) * u

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high). Uses the float path; fine for ranges << 2**53."""
        if high <= low:
            raise ValueError("empty integer range")
        u = self.random(size)
        v = np.floor(low + (high - low) * np.asarray(u)).astype(np.int64)
        v = np.minimum(v, high - 1)
        return int(v) if size is None else v

    def normal(self, size) -> np.ndarray:
        """Standard normals via Box-Muller (cosine branch only)."""
        n = int(np.prod(size))
        u = self.random((2, n))
        u1 = 1.0 - u[0]  # (0, 1]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u[1])
        return z.reshape(size)
