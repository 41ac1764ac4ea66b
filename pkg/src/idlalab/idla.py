"""Internal DLA: sequential and wave-based cluster builders, inner/outer
error measurement.

Explorers launch from the origin in label order; explorer k settles at its
first exit of the cluster A(k-1).  The wave builder stops unsettled
explorers on successive spheres and releases them next wave (equal in law
by the abelian property; pathwise identical for a single infinite wave).
Each explorer owns stream unit k, so a cluster is a pure function of
(seed, N).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, uint64

from ._rng import LANE_TRAJ, RandomStream, _stream_block
from .lattice import Region, Site
from .walk import StepCapExceeded

_GRID_OVERFLOW = 1
_CAP_EXCEEDED = 2


class GridOverflow(RuntimeError):
    pass


@dataclass
class Cluster:
    """Occupied sites in settle order: site k settled by explorer k at time
    times[k-1]."""

    d: int
    sites: np.ndarray  # (N, d) int64, settle order
    times: np.ndarray  # (N,) int64
    seed: int

    def __len__(self) -> int:
        return len(self.sites)

    @property
    def occupied(self) -> Region:
        return Region(map(tuple, self.sites.tolist()), d=self.d)

    def site_set(self) -> frozenset:
        return frozenset(map(tuple, self.sites.tolist()))


@dataclass
class FluctuationRecord:
    """Inner/outer sphericity errors of a cluster of |B(0, n)| sites."""

    n: float
    N: int
    delta_inner: float
    delta_outer: float
    seed: int

    def __post_init__(self):
        if self.delta_inner > self.n:
            raise ValueError("inner error cannot exceed the radius")
        if self.delta_outer < 0:
            raise ValueError("outer error is non-negative")


@njit(inline="always")
def _next_chunk(seed, unit, word_idx, bits, nbits, b, chunk_mask, nd,
                lane=LANE_TRAJ):
    """Next accepted direction chunk; returns (chunk, word_idx, bits, nbits)."""
    while True:
        if nbits < b:
            blk = word_idx >> 2
            w0, w1, w2, w3 = _stream_block(seed, unit, lane, blk)
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
            return c, word_idx, bits, nbits


@njit(cache=True)
def _idla_seq_kernel(N, d, seed, L, step_cap):
    """Sequential IDLA: returns (sites, times, error flag)."""
    nd = 2 * d
    b = 1
    while (1 << b) < nd:
        b += 1
    chunk_mask = (1 << b) - 1
    side = 2 * L + 1
    strides = np.empty(d, dtype=np.int64)
    strides[d - 1] = 1
    for a in range(d - 2, -1, -1):
        strides[a] = strides[a + 1] * side
    occ = np.zeros(side ** d, dtype=np.uint8)
    origin_flat = 0
    for a in range(d):
        origin_flat += L * strides[a]
    sites = np.zeros((N, d), dtype=np.int64)
    times = np.zeros(N, dtype=np.int64)
    pos = np.empty(d, dtype=np.int64)
    safe2 = (L - 1) * (L - 1)
    for i in range(1, N + 1):
        for a in range(d):
            pos[a] = 0
        flat = origin_flat
        n2 = 0
        t = 0
        word_idx = 0
        bits = uint64(0)
        nbits = 0
        while occ[flat] == 1:
            c, word_idx, bits, nbits = _next_chunk(seed, i, word_idx, bits,
                                                   nbits, b, chunk_mask, nd)
            axis = c >> 1
            s = 1 - 2 * (c & 1)
            old = pos[axis]
            pos[axis] = old + s
            n2 += 2 * old * s + 1
            flat += s * strides[axis]
            t += 1
            if t > step_cap:
                return sites, times, _CAP_EXCEEDED
        if n2 >= safe2:
            return sites, times, _GRID_OVERFLOW
        occ[flat] = 1
        for a in range(d):
            sites[i - 1, a] = pos[a]
        times[i - 1] = t
    return sites, times, 0


@njit(cache=True)
def _idla_wave_kernel(N, d, seed, L, radii, step_cap):
    """Wave IDLA: unsettled explorers advance to the next sphere each wave.

    ``radii[k]`` is the stopping radius of wave k+1; per-explorer stream
    cursors persist across waves so trajectories match the sequential
    builder draw for draw.  Returns (sites, times, waves_used, error)."""
    nd = 2 * d
    b = 1
    while (1 << b) < nd:
        b += 1
    chunk_mask = (1 << b) - 1
    side = 2 * L + 1
    strides = np.empty(d, dtype=np.int64)
    strides[d - 1] = 1
    for a in range(d - 2, -1, -1):
        strides[a] = strides[a + 1] * side
    occ = np.zeros(side ** d, dtype=np.uint8)
    origin_flat = 0
    for a in range(d):
        origin_flat += L * strides[a]
    sites = np.zeros((N, d), dtype=np.int64)
    times = np.zeros(N, dtype=np.int64)
    settled = np.zeros(N + 1, dtype=np.uint8)
    pos = np.zeros((N + 1, d), dtype=np.int64)
    flats = np.full(N + 1, origin_flat, dtype=np.int64)
    n2s = np.zeros(N + 1, dtype=np.int64)
    steps = np.zeros(N + 1, dtype=np.int64)
    words = np.zeros(N + 1, dtype=np.int64)
    bitss = np.zeros(N + 1, dtype=np.uint64)
    nbits_arr = np.zeros(N + 1, dtype=np.int64)
    safe2 = (L - 1) * (L - 1)
    remaining = N
    waves = 0
    for k in range(len(radii)):
        if remaining == 0:
            break
        waves += 1
        r2 = radii[k] * radii[k]
        for i in range(1, N + 1):
            if settled[i] == 1:
                continue
            flat = flats[i]
            n2 = n2s[i]
            t = steps[i]
            word_idx = words[i]
            bits = bitss[i]
            nbits = nbits_arr[i]
            while True:
                if n2 >= r2:
                    break  # stopped on this wave's sphere
                if occ[flat] == 0:
                    if n2 >= safe2:
                        return sites, times, waves, _GRID_OVERFLOW
                    occ[flat] = 1
                    for a in range(d):
                        sites[i - 1, a] = pos[i, a]
                    times[i - 1] = t
                    settled[i] = 1
                    remaining -= 1
                    break
                c, word_idx, bits, nbits = _next_chunk(seed, i, word_idx,
                                                       bits, nbits, b,
                                                       chunk_mask, nd)
                axis = c >> 1
                s = 1 - 2 * (c & 1)
                old = pos[i, axis]
                pos[i, axis] = old + s
                n2 += 2 * old * s + 1
                flat += s * strides[axis]
                t += 1
                if t > step_cap:
                    return sites, times, waves, _CAP_EXCEEDED
            flats[i] = flat
            n2s[i] = n2
            steps[i] = t
            words[i] = word_idx
            bitss[i] = bits
            nbits_arr[i] = nbits
    if remaining > 0:
        return sites, times, waves, _GRID_OVERFLOW
    return sites, times, waves, 0


def _grid_halfwidth(N: int, d: int) -> int:
    from .potential import unit_ball_volume

    r_est = (max(N, 1) / unit_ball_volume(d)) ** (1.0 / d)
    return int(math.ceil(r_est)) + 16 + 8 * int(math.ceil(math.log(N + 2)))


def _check(flag: int):
    if flag == _GRID_OVERFLOW:
        raise GridOverflow("cluster outgrew the occupancy grid")
    if flag == _CAP_EXCEEDED:
        raise StepCapExceeded("an explorer exceeded the per-walk step cap")


def grow_idla(N: int, rng: RandomStream, d: int = 2,
              step_cap: int = 10 ** 10) -> Cluster:
    """Cluster of exactly N sites; explorer k uses stream unit k."""
    if N < 0:
        raise ValueError("N must be non-negative")
    if N == 0:
        return Cluster(d, np.zeros((0, d), dtype=np.int64),
                       np.zeros(0, dtype=np.int64), rng.seed)
    L = _grid_halfwidth(N, d)
    sites, times, flag = _idla_seq_kernel(N, d, rng.seed, L, step_cap)
    _check(flag)
    return Cluster(d, sites, times, rng.seed)


def grow_idla_waves(N: int, shells, rng: RandomStream, d: int | None = None,
                    step_cap: int = 10 ** 10) -> tuple[Cluster, int]:
    """Same law as grow_idla via exploration waves stopped on the shell
    spheres; returns (cluster, waves used)."""
    if N < 0:
        raise ValueError("N must be non-negative")
    d = shells.d if d is None else d
    if N == 0:
        return Cluster(d, np.zeros((0, d), dtype=np.int64),
                       np.zeros(0, dtype=np.int64), rng.seed), 0
    radii = [int(r) for r in shells.r[1:]] + [10 ** 9]
    L = max(_grid_halfwidth(N, d), int(shells.b[-1]) + 2)
    sites, times, waves, flag = _idla_wave_kernel(
        N, d, rng.seed, L, np.asarray(radii, dtype=np.int64), step_cap)
    _check(flag)
    return Cluster(d, sites, times, rng.seed), waves


def ball_site_count(n: float, d: int) -> int:
    """|B(0, n)| by direct lattice count."""
    reach = int(math.ceil(n))
    ax = np.arange(-reach, reach + 1, dtype=np.int64)
    grids = np.meshgrid(*([ax] * d), indexing="ij")
    m2 = sum(g * g for g in grids)
    return int((m2 < n * n).sum())


def measure_errors(cluster: Cluster, n: float) -> FluctuationRecord:
    """delta_inner = n - min uncovered norm, delta_outer = max covered
    norm - n (clamped at 0); requires |cluster| = |B(0, n)|."""
    N = len(cluster)
    expect = ball_site_count(n, cluster.d)
    if N != expect:
        raise ValueError(f"cluster has {N} sites, |B(0,{n})| = {expect}")
    occupied = cluster.site_set()
    if N == 0:
        return FluctuationRecord(n, 0, n, 0.0, cluster.seed)
    norms = np.sqrt((cluster.sites.astype(float) ** 2).sum(axis=1))
    delta_outer = max(0.0, float(norms.max()) - n)
    # the min uncovered site lies within B(0, n + 1): the cluster is too
    # small to cover it
    reach = int(math.ceil(n)) + 1
    ax = np.arange(-reach, reach + 1, dtype=np.int64)
    grids = np.meshgrid(*([ax] * cluster.d), indexing="ij")
    m2 = sum(g * g for g in grids)
    order = np.argsort(m2, axis=None, kind="stable")
    coords = np.stack([g.ravel()[order] for g in grids], axis=-1)
    m2sorted = m2.ravel()[order]
    delta_inner = None
    for row, v in zip(coords.tolist(), m2sorted.tolist()):
        if tuple(row) not in occupied:
            delta_inner = n - math.sqrt(v)
            break
    if delta_inner is None:  # impossible: |B(0, n+1)| > |cluster|
        raise AssertionError("no uncovered site found")
    return FluctuationRecord(n, N, delta_inner, delta_outer, cluster.seed)
