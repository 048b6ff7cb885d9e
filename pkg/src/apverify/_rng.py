"""Counter-based random streams for reproducible parallel simulation.

Each path draws from its own Philox2x64-10 stream addressed by
(key, domain, path index, position): the key mixes the master seed with an
ensemble purpose tag, the domain separates normal draws from uniform draws,
and the position advances per 128-bit block. Results are therefore a pure
function of (seed, purpose, path index) and independent of scheduling.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit
from numba.types import Tuple, UniTuple, boolean, float64, uint64

U64 = np.uint64

# Explicit signatures: callers may hold counters as Python ints between
# calls, and value-based typing of ints is not deterministic.
_DRAW_SIG = Tuple((float64, uint64, float64, boolean))(
    uint64, uint64, uint64, float64, boolean)

_PHILOX_M = U64(0xD2B74407B1CE6E93)
_WEYL = U64(0x9E3779B97F4A7C15)
_SM_M1 = U64(0xBF58476D1CE4E5B9)
_SM_M2 = U64(0x94D049BB133111EB)
_MASK32 = U64(0xFFFFFFFF)
_ONE = U64(1)

# Domain tags packed into the top byte of the second counter word.
DOMAIN_NORMAL = U64(0)
DOMAIN_UNIFORM = U64(1)

_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / 9007199254740992.0  # 2**-53


@njit(uint64(uint64), cache=True)
def splitmix64(x):
    z = x + _WEYL
    z = (z ^ (z >> U64(30))) * _SM_M1
    z = (z ^ (z >> U64(27))) * _SM_M2
    return z ^ (z >> U64(31))


@njit(uint64(uint64, uint64), cache=True)
def _mulhi64(a, b):
    a_lo = a & _MASK32
    a_hi = a >> U64(32)
    b_lo = b & _MASK32
    b_hi = b >> U64(32)
    t = a_lo * b_lo
    carry = t >> U64(32)
    t = a_hi * b_lo + carry
    w1 = t & _MASK32
    w2 = t >> U64(32)
    t = a_lo * b_hi + w1
    carry = t >> U64(32)
    return a_hi * b_hi + w2 + carry


@njit(UniTuple(uint64, 2)(uint64, uint64, uint64), cache=True)
def philox2x64(c0, c1, key):
    """One 128-bit block of Philox2x64-10: counter (c0, c1), 64-bit key."""
    x0 = c0
    x1 = c1
    k = key
    for _ in range(10):
        hi = _mulhi64(x0, _PHILOX_M)
        lo = x0 * _PHILOX_M
        x0 = hi ^ k ^ x1
        x1 = lo
        k = k + _WEYL
    return x0, x1


@njit(uint64(uint64, uint64), cache=True)
def derive_key(seed, purpose):
    """64-bit stream key from (master seed, ensemble purpose tag)."""
    return splitmix64(splitmix64(seed) ^ splitmix64(purpose))


@njit(uint64(uint64, uint64), cache=True)
def stream_counter(domain, index):
    """Second counter word: domain tag in the top byte, path index below."""
    return (domain << U64(56)) | (index & U64(0x00FFFFFFFFFFFFFF))


@njit(float64(uint64), cache=True)
def to_unit(word):
    """Map a 64-bit word to a double in (0, 1]."""
    return ((word >> U64(11)) + _ONE) * _INV_2_53


@njit(_DRAW_SIG, cache=True)
def draw_uniform(key, c1, pos, cache, have):
    """Next uniform in (0, 1]; two per Philox block, one cached.

    Returns (u, pos, cache, have) for threading through caller locals.
    """
    if have:
        return cache, pos, 0.0, False
    w0, w1 = philox2x64(pos, c1, key)
    return to_unit(w0), pos + _ONE, to_unit(w1), True


@njit(_DRAW_SIG, cache=True)
def draw_normal(key, c1, pos, cache, have):
    """Next standard normal via Box-Muller; one pair per Philox block.

    Returns (z, pos, cache, have) for threading through caller locals.
    """
    if have:
        return cache, pos, 0.0, False
    w0, w1 = philox2x64(pos, c1, key)
    r = math.sqrt(-2.0 * math.log(to_unit(w0)))
    ang = _TWO_PI * to_unit(w1)
    return r * math.cos(ang), pos + _ONE, r * math.sin(ang), True
