"""Simple random walk trajectories, hitting times, exit sampling.

Randomness comes from the addressable streams in ``_rng``; the neighbor
order is fixed as (+e1, -e1, ..., +e_d, -e_d) so trajectories replay
exactly from (seed, unit, lane).  Monte Carlo exit sampling over a finite
region runs in a compiled kernel on a rasterized membership bitmap, one
stream unit per sample walk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit, uint64

from ._rng import LANE_TRAJ, RandomStream, _stream_block
from .lattice import Region, Site, neighbor_offsets

DEFAULT_STEP_CAP = 10 ** 9


class StepCapExceeded(RuntimeError):
    """A walk exceeded its step cap: probable geometry bug or transient
    escape; never silently truncated."""


@dataclass
class HittingResult:
    site: Site
    time: int


@dataclass
class Walker:
    """A simple random walk bound to one draw stream."""

    stream: RandomStream
    position: Site
    steps: int = 0

    @property
    def d(self) -> int:
        return len(self.position)


def walker(rng: RandomStream, start: Site = None, d: int = 2,
           unit: int | None = None) -> Walker:
    start = tuple(start) if start is not None else (0,) * d
    stream = rng if unit is None else rng.child(unit=unit, lane=LANE_TRAJ)
    return Walker(stream, start)


def step(w: Walker) -> Site:
    """Advance one uniform nearest-neighbor step; returns the new position."""
    d = w.d
    k = w.stream.direction(d)
    axis, sign = k >> 1, 1 - 2 * (k & 1)
    pos = list(w.position)
    pos[axis] += sign
    w.position = tuple(pos)
    w.steps += 1
    return w.position


def run_until_hit(w: Walker, target, step_cap: int = DEFAULT_STEP_CAP) -> HittingResult:
    """First time t >= 0 at which the position satisfies ``target`` (a
    site predicate); t = 0 allowed."""
    if step_cap <= 0:
        raise ValueError("step cap must be positive")
    t0 = w.steps
    while True:
        if target(w.position):
            return HittingResult(w.position, w.steps - t0)
        if w.steps - t0 >= step_cap:
            raise StepCapExceeded(f"no hit within {step_cap} steps")
        step(w)


# ---------------------------------------------------------------------------
# compiled exit sampling
# ---------------------------------------------------------------------------


@njit(cache=True)
def _exit_walk_kernel(bitmap, shape, low, start, samples, seed, unit_base,
                      cap):
    """Walks from ``start`` until leaving the bitmap region; one stream unit
    per sample.  Returns (exit sites, exit times); time -1 marks a cap hit."""
    d = start.shape[0]
    nd = 2 * d
    b = 1
    while (1 << b) < nd:
        b += 1
    chunk_mask = (1 << b) - 1
    out_sites = np.empty((samples, d), dtype=np.int64)
    out_times = np.empty(samples, dtype=np.int64)
    pos = np.empty(d, dtype=np.int64)
    for s in range(samples):
        for a in range(d):
            pos[a] = start[a]
        unit = unit_base + s
        word_idx = 0
        bits = uint64(0)
        nbits = 0
        t = 0
        while True:
            inside = True
            flat = 0
            for a in range(d):
                c = pos[a] - low[a]
                if c < 0 or c >= shape[a]:
                    inside = False
                    break
                flat = flat * shape[a] + c
            if not inside or bitmap[flat] == 0:
                for a in range(d):
                    out_sites[s, a] = pos[a]
                out_times[s] = t
                break
            if t >= cap:
                out_times[s] = -1
                for a in range(d):
                    out_sites[s, a] = pos[a]
                break
            # next direction chunk
            while True:
                if nbits < b:
                    blk = word_idx >> 2
                    w0, w1, w2, w3 = _stream_block(seed, unit, LANE_TRAJ, blk)
                    k = word_idx & 3
                    if k == 0:
                        bits = uint64(w0)
                    elif k == 1:
                        bits = uint64(w1)
                    elif k == 2:
                        bits = uint64(w2)
                    else:
                        bits = uint64(w3)
                    nbits = 32
                    word_idx += 1
                c = int(bits & chunk_mask)
                bits >>= b
                nbits -= b
                if c < nd:
                    break
            axis = c >> 1
            pos[axis] += 1 - 2 * (c & 1)
            t += 1
    return out_sites, out_times


@njit(cache=True)
def _exit_walk_multi_kernel(bitmap, shape, low, starts, seed, unit_base, cap):
    """One exit walk per row of ``starts``; stream unit = unit_base + row."""
    m, d = starts.shape
    nd = 2 * d
    b = 1
    while (1 << b) < nd:
        b += 1
    chunk_mask = (1 << b) - 1
    out_sites = np.empty((m, d), dtype=np.int64)
    out_times = np.empty(m, dtype=np.int64)
    pos = np.empty(d, dtype=np.int64)
    for s in range(m):
        for a in range(d):
            pos[a] = starts[s, a]
        unit = unit_base + s
        word_idx = 0
        bits = uint64(0)
        nbits = 0
        t = 0
        while True:
            inside = True
            flat = 0
            for a in range(d):
                c = pos[a] - low[a]
                if c < 0 or c >= shape[a]:
                    inside = False
                    break
                flat = flat * shape[a] + c
            if not inside or bitmap[flat] == 0:
                for a in range(d):
                    out_sites[s, a] = pos[a]
                out_times[s] = t
                break
            if t >= cap:
                out_times[s] = -1
                for a in range(d):
                    out_sites[s, a] = pos[a]
                break
            while True:
                if nbits < b:
                    blk = word_idx >> 2
                    w0, w1, w2, w3 = _stream_block(seed, unit, LANE_TRAJ, blk)
                    k = word_idx & 3
                    if k == 0:
                        bits = uint64(w0)
                    elif k == 1:
                        bits = uint64(w1)
                    elif k == 2:
                        bits = uint64(w2)
                    else:
                        bits = uint64(w3)
                    nbits = 32
                    word_idx += 1
                c = int(bits & chunk_mask)
                bits >>= b
                nbits -= b
                if c < nd:
                    break
            axis = c >> 1
            pos[axis] += 1 - 2 * (c & 1)
            t += 1
    return out_sites, out_times


def exit_samples_from_each(region: Region, starts: np.ndarray,
                           rng: RandomStream,
                           step_cap: int = DEFAULT_STEP_CAP):
    """One exit walk per start site (rows of ``starts``)."""
    bitmap, shape, low = _region_bitmap(region)
    sites, times = _exit_walk_multi_kernel(
        bitmap, shape, low, np.asarray(starts, dtype=np.int64), rng.seed,
        rng.unit, step_cap)
    if (times < 0).any():
        raise StepCapExceeded("a walk hit the step cap")
    return sites, times


def _region_bitmap(region: Region):
    arr = region.sites_array()
    low = arr.min(axis=0) - 1
    high = arr.max(axis=0) + 1
    shape = (high - low + 1).astype(np.int64)
    bitmap = np.zeros(int(np.prod(shape)), dtype=np.uint8)
    flat = np.zeros(len(arr), dtype=np.int64)
    for a in range(region.d):
        flat = flat * shape[a] + (arr[:, a] - low[a])
    bitmap[flat] = 1
    return bitmap, shape, low


def exit_samples(region: Region, start: Site, samples: int, rng: RandomStream,
                 step_cap: int = DEFAULT_STEP_CAP):
    """(sites, times) of the first exit from ``region`` for ``samples``
    independent walks from ``start`` (stream units rng.unit, rng.unit+1, ...)."""
    bitmap, shape, low = _region_bitmap(region)
    start_arr = np.asarray(start, dtype=np.int64)
    sites, times = _exit_walk_kernel(bitmap, shape, low, start_arr, samples,
                                     rng.seed, rng.unit, step_cap)
    if (times < 0).any():
        raise StepCapExceeded(f"{int((times < 0).sum())} walks hit the "
                              f"step cap {step_cap}")
    return sites, times


def exit_distribution(start: Site, region: Region, samples: int,
                      rng: RandomStream,
                      step_cap: int = DEFAULT_STEP_CAP) -> dict[Site, float]:
    """Empirical exit-site frequencies over the outer boundary of ``region``
    (they sum to 1)."""
    if tuple(start) not in region:
        raise ValueError("start must lie inside the region")
    sites, _ = exit_samples(region, start, samples, rng, step_cap)
    freq: dict[Site, float] = {}
    w = 1.0 / samples
    for row in sites.tolist():
        key = tuple(row)
        freq[key] = freq.get(key, 0.0) + w
    return freq
