"""Portable Gaussian stream: splitmix64 seeding, xoshiro256++, Box-Muller.

The stream is fully defined here so projection matrices are reproducible
bit-for-bit across runs and machines sharing the same libm:

* state words ``s0..s3`` are four successive splitmix64 outputs of the seed;
* each Box-Muller pair consumes two xoshiro256++ outputs ``a, b``:
  ``u1 = ((a >> 11) + 1) * 2**-53`` (in (0, 1]), ``u2 = (b >> 11) * 2**-53``,
  ``z0 = sqrt(-2 ln u1) cos(2 pi u2)``, ``z1 = sqrt(-2 ln u1) sin(2 pi u2)``;
* values are emitted ``z0, z1, z0, z1, ...``; an odd tail drops the last ``z1``.
"""
from __future__ import annotations

import hashlib
import struct

import numpy as np
from numba import njit, uint64

MASK64 = (1 << 64) - 1


def layer_seed(global_seed: int, layer_name: str) -> int:
    """First 8 bytes (little-endian) of SHA-256(le64(global_seed) || utf8(name))."""
    payload = struct.pack("<Q", global_seed & MASK64) + layer_name.encode("utf-8")
    return struct.unpack("<Q", hashlib.sha256(payload).digest()[:8])[0]


@njit(cache=True)
def _splitmix64(x):
    x = x + uint64(0x9E3779B97F4A7C15)
    z = x
    z = (z ^ (z >> uint64(30))) * uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> uint64(27))) * uint64(0x94D049BB133111EB)
    return x, z ^ (z >> uint64(31))


@njit(cache=True)
def _rotl(x, k):
    return (x << uint64(k)) | (x >> uint64(64 - k))


@njit(cache=True)
def _seed_state(seed):
    s = np.empty(4, dtype=np.uint64)
    x = uint64(seed)
    for i in range(4):
        x, s[i] = _splitmix64(x)
    return s


@njit(cache=True)
def _next(s):
    s0, s1, s2, s3 = s[0], s[1], s[2], s[3]
    result = _rotl(s0 + s3, 23) + s0
    t = s1 << uint64(17)
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = _rotl(s3, 45)
    s[0], s[1], s[2], s[3] = s0, s1, s2, s3
    return result


@njit(cache=True)
def _uint64_stream(seed, n):
    s = _seed_state(seed)
    out = np.empty(n, dtype=np.uint64)
    for i in range(n):
        out[i] = _next(s)
    return out


@njit(cache=True)
def _normal_stream(seed, n):
    s = _seed_state(seed)
    out = np.empty(n, dtype=np.float64)
    two_pi = 2.0 * np.pi
    scale = 1.0 / 9007199254740992.0  # 2**-53
    i = 0
    while i < n:
        a = _next(s)
        b = _next(s)
        u1 = (float(a >> uint64(11)) + 1.0) * scale
        u2 = float(b >> uint64(11)) * scale
        r = np.sqrt(-2.0 * np.log(u1))
        out[i] = r * np.cos(two_pi * u2)
        if i + 1 < n:
            out[i + 1] = r * np.sin(two_pi * u2)
        i += 2
    return out


def uint64_stream(seed: int, n: int) -> np.ndarray:
    return _uint64_stream(np.uint64(seed & MASK64), int(n))


def normal_stream(seed: int, n: int) -> np.ndarray:
    """``n`` standard normal draws from the stream seeded by ``seed``."""
    return _normal_stream(np.uint64(seed & MASK64), int(n))
