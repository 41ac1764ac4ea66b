"""Counter-based randomness (Philox4x32-10) with addressable streams.

Every random draw in the package comes from one generator family keyed by
``(seed, unit, lane)``:

* ``seed``  -- 64-bit run seed (the Philox key),
* ``unit``  -- 64-bit stream id, in practice an explorer index (< 2**32),
* ``lane``  -- namespace separating draw purposes on the same unit.

The Philox counter is laid out as ``(block_lo, block_hi, unit, lane)``, so
distinct ``(unit, lane)`` pairs can never collide and identical coordinates
replay identical words on any platform.

Draw accounting (binding for replay and for the coupled construction, which
consumes one shared stream in program order):

* a *direction* draw takes one ``b``-bit chunk from the current 32-bit word,
  LSB first, where ``b = bit_length(2d - 1)``; chunks never straddle words
  and chunk values >= 2d are rejected (next chunk is taken).  d = 2 consumes
  exactly 16 directions per word.
* a *uniform* draw discards any partially used word and consumes the next
  two whole words (53 significant bits).
* flashing decision draws for (explorer, shell) live on ``LANE_FLASH`` at
  block pair ``(2*shell, 2*shell + 1)`` and do not disturb any cursor.
"""

from __future__ import annotations

import numpy as np
from numba import njit, uint32, uint64

MASK32 = 0xFFFFFFFF
MASK64 = 0xFFFFFFFFFFFFFFFF
SEED_MASK = 0x7FFFFFFFFFFFFFFF  # seeds stay below 2**63 for compiled kernels

LANE_TRAJ = 0  # walk increments, one stream per explorer
LANE_FLASH = 1  # per-(explorer, shell) flashing decisions
LANE_SHARED = 2  # the single shared increment stream of the coupled build
LANE_MISC = 3  # everything else (audits, coupon draws, ...)

_PHILOX_M0 = uint32(0xD2511F53)
_PHILOX_M1 = uint32(0xCD9E8D57)
_PHILOX_W0 = uint32(0x9E3779B9)
_PHILOX_W1 = uint32(0xBB67AE85)

_U53_INV = 1.0 / (1 << 53)


@njit(cache=True)
def _philox4x32(c0, c1, c2, c3, k0, k1):
    """One Philox4x32-10 block. Arguments and results are uint32-valued."""
    c0 = uint64(c0) & MASK32
    c1 = uint64(c1) & MASK32
    c2 = uint64(c2) & MASK32
    c3 = uint64(c3) & MASK32
    k0 = uint64(k0) & MASK32
    k1 = uint64(k1) & MASK32
    for r in range(10):
        if r > 0:
            k0 = (k0 + _PHILOX_W0) & MASK32
            k1 = (k1 + _PHILOX_W1) & MASK32
        p0 = uint64(_PHILOX_M0) * c0
        p1 = uint64(_PHILOX_M1) * c2
        hi0 = p0 >> 32
        lo0 = p0 & MASK32
        hi1 = p1 >> 32
        lo1 = p1 & MASK32
        n0 = hi1 ^ c1 ^ k0
        n1 = lo1
        n2 = hi0 ^ c3 ^ k1
        n3 = lo0
        c0, c1, c2, c3 = n0, n1, n2, n3
    return c0, c1, c2, c3


@njit(cache=True)
def _stream_block(seed, unit, lane, block):
    """Four words of stream (seed, unit, lane) at the given block index."""
    k0 = uint64(seed) & MASK32
    k1 = (uint64(seed) >> 32) & MASK32
    c0 = uint64(block) & MASK32
    c1 = (uint64(block) >> 32) & MASK32
    c2 = uint64(unit) & MASK32
    c3 = uint64(lane) & MASK32
    return _philox4x32(c0, c1, c2, c3, k0, k1)


@njit(cache=True)
def _fill_words(out, seed, unit, lane, start_word):
    """Fill ``out`` with consecutive stream words starting at ``start_word``."""
    n = out.shape[0]
    i = 0
    word = start_word
    while i < n:
        block = word >> 2
        w0, w1, w2, w3 = _stream_block(seed, unit, lane, block)
        k = word & 3
        if k <= 0 and i < n:
            out[i] = w0
            i += 1
            word += 1
            k = 1
        if k <= 1 and i < n:
            out[i] = w1
            i += 1
            word += 1
            k = 2
        if k <= 2 and i < n:
            out[i] = w2
            i += 1
            word += 1
            k = 3
        if k <= 3 and i < n:
            out[i] = w3
            i += 1
            word += 1
    return out


@njit(cache=True)
def _flash_words(seed, explorer, shell):
    """The 8 words backing the (X, Y, R) decision of (explorer, shell)."""
    a0, a1, a2, a3 = _stream_block(seed, explorer, LANE_FLASH, 2 * shell)
    b0, b1, b2, b3 = _stream_block(seed, explorer, LANE_FLASH, 2 * shell + 1)
    return a0, a1, a2, a3, b0, b1, b2, b3


@njit(cache=True)
def _u53(hi, lo):
    return float(((uint64(hi) << 32 | uint64(lo)) >> 11)) * _U53_INV


@njit(cache=True)
def flash_draw(seed, explorer, shell, h, d):
    """(X, Y, R) for one (explorer, shell): X ~ Bernoulli(1/h^d), Y ~
    Bernoulli(1/2) except Y=1 forced on shell 0, R = h * U^(1/d)."""
    w0, w1, w2, w3, w4, w5, w6, w7 = _flash_words(seed, explorer, shell)
    x = _u53(w0, w1) < 1.0 / float(h) ** d
    y = True if shell == 0 else (w2 & 1) == 1
    r = float(h) * _u53(w4, w5) ** (1.0 / d)
    return x, y, r


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(seed: int, *tags: int) -> int:
    """Deterministic 64-bit sub-seed for an experiment cell.

    Used to give parallel (radius, repetition) cells disjoint Philox keys.
    """
    x = seed & MASK64
    for t in tags:
        x = splitmix64(x ^ ((t & MASK64) * 0x9E3779B97F4A7C15 & MASK64))
    return x & SEED_MASK


class RandomStream:
    """One addressable draw stream; see module docstring for the contract.

    Identical ``(seed, unit, lane)`` triples reproduce identical draw
    sequences; distinct triples are independent Philox streams.
    """

    __slots__ = ("seed", "unit", "lane", "_word", "_bits", "_nbits", "_buf",
                 "_buf_start")

    _BUF = 512

    def __init__(self, seed: int, unit: int = 0, lane: int = LANE_TRAJ):
        if not 0 <= unit < (1 << 32):
            raise ValueError("unit must fit in 32 bits")
        self.seed = seed & SEED_MASK
        self.unit = unit
        self.lane = lane
        self._word = 0  # index of the next unconsumed word
        self._bits = 0
        self._nbits = 0
        self._buf = np.empty(0, dtype=np.uint64)
        self._buf_start = 0

    @property
    def words_consumed(self) -> int:
        return self._word

    def _next_word(self) -> int:
        i = self._word - self._buf_start
        if i < 0 or i >= self._buf.shape[0]:
            self._buf_start = self._word
            self._buf = _fill_words(np.empty(self._BUF, dtype=np.uint64),
                                    self.seed, self.unit, self.lane,
                                    self._word)
            i = 0
        self._word += 1
        return int(self._buf[i])

    def direction(self, d: int) -> int:
        """Uniform index into the 2d neighbor order (+e1, -e1, ..., +e_d, -e_d)."""
        nd = 2 * d
        b = (nd - 1).bit_length()
        mask = (1 << b) - 1
        while True:
            if self._nbits < b:
                self._bits = self._next_word()
                self._nbits = 32
            chunk = self._bits & mask
            self._bits >>= b
            self._nbits -= b
            if chunk < nd:
                return chunk

    def uniform(self) -> float:
        """53-bit uniform in [0, 1); flushes any partially consumed word."""
        self._nbits = 0
        hi = self._next_word()
        lo = self._next_word()
        return float(((hi << 32) | lo) >> 11) * _U53_INV

    def bernoulli(self, p: float) -> bool:
        return self.uniform() < p

    def radial(self, h: float, d: int) -> float:
        """Radius in [0, h] with density d * r^(d-1) / h^d (inverse CDF)."""
        return h * self.uniform() ** (1.0 / d)

    def child(self, unit: int | None = None, lane: int | None = None) -> "RandomStream":
        """Fresh stream with the same seed and new (unit, lane) coordinates."""
        return RandomStream(self.seed,
                            self.unit if unit is None else unit,
                            self.lane if lane is None else lane)

    def flash_draw(self, explorer: int, shell: int, h: int, d: int):
        x, y, r = flash_draw(self.seed, explorer, shell, h, d)
        return bool(x), bool(y), float(r)

    def __repr__(self) -> str:  # pragma: no cover
        return (f"RandomStream(seed={self.seed:#x}, unit={self.unit}, "
                f"lane={self.lane}, word={self._word})")
