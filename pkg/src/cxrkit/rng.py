"""Deterministic seeded random streams.

splitmix64 expands a (seed, stream-name) pair into lane states for a
vectorized xoshiro256** generator. Every module draws from its own named
stream, so corpus generation, weight init, and sampling noise are
independent: reordering one never perturbs another.
"""

from __future__ import annotations

import numpy as np

_U64 = np.uint64
_MASK = _U64(0xFFFFFFFFFFFFFFFF)


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    k = _U64(k)
    return (x << k) | (x >> (_U64(64) - k))


def _splitmix64(state: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One splitmix64 step; returns (output, next_state)."""
    with np.errstate(over="ignore"):
        state = state + _U64(0x9E3779B97F4A7C15)
        z = state
        z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
        return z ^ (z >> _U64(31)), state


def _fnv1a(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class Rng:
    """Lane-parallel xoshiro256** stream, bitwise reproducible.

    `lanes` controls vector width only; the emitted sequence for a given
    (seed, stream, lanes) triple is fixed. All draw helpers consume whole
    generator blocks so shapes never retroactively shift the stream.
    """

    LANES = 256

    def __init__(self, seed: int, stream: str = "", lanes: int = LANES):
        key = np.uint64((seed ^ _fnv1a(stream)) & 0xFFFFFFFFFFFFFFFF)
        st = np.full(4 * lanes, key, dtype=np.uint64)
        # decorrelate lanes: each state word gets its own splitmix output
        outs = np.empty(4 * lanes, dtype=np.uint64)
        s = key
        for i in range(4 * lanes):
            out, s = _splitmix64(np.uint64(s))
            outs[i] = out
        del st
        self._s = outs.reshape(4, lanes)
        self._lanes = lanes

    def _block(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        with np.errstate(over="ignore"):
            result = _rotl(s1 * _U64(5), 7) * _U64(9)
        t = s1 << _U64(17)
        s2 = s2 ^ s0
        s3 = s3 ^ s1
        s1 = s1 ^ s2
        s0 = s0 ^ s3
        s2 = s2 ^ t
        s3 = _rotl(s3, 45)
        self._s = np.stack([s0, s1, s2, s3])
        return result

    def uint64(self, n: int) -> np.ndarray:
        blocks = max(1, -(-n // self._lanes))
        out = np.concatenate([self._block() for _ in range(blocks)])
        return out[:n]

    def uniform(self, shape=()) -> np.ndarray:
        """U[0,1) with 53-bit mantissas."""
        n = int(np.prod(shape)) if shape else 1
        u = (self.uint64(n) >> _U64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape) if shape else float(u[0])

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        """Standard normals via Box-Muller."""
        n = int(np.prod(shape)) if shape else 1
        m = -(-n // 2)
        u1 = (self.uint64(m).astype(np.float64) + 1.0) * (2.0 ** -64)  # (0,1]
        u2 = self.uint64(m).astype(np.float64) * (2.0 ** -64)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        z = z.astype(dtype)
        return z.reshape(shape) if shape else dtype(z[0])

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high). Modulo draw; bias is O(range/2^64)."""
        if high <= low:
            raise ValueError("empty integer range")
        n = int(np.prod(shape)) if shape else 1
        v = (self.uint64(n) % _U64(high - low)).astype(np.int64) + low
        return v.reshape(shape) if shape else int(v[0])

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uint64(n), kind="stable")

    def choice_index(self, weights) -> int:
        """Single weighted category draw."""
        w = np.asarray(weights, dtype=np.float64)
        c = np.cumsum(w / w.sum())
        return int(np.searchsorted(c, self.uniform(), side="right").clip(0, len(w) - 1))

    def spawn(self, substream: str) -> "Rng":
        """Independent child stream; parent state is not consumed."""
        child = Rng.__new__(Rng)
        mix = int(self._s[0, 0] ^ self._s[3, -1])
        child.__init__(mix, substream, self._lanes)
        return child
