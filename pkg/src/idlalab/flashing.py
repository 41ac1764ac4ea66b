"""The flashing aggregation process: shell partition of Z^d, cells and
tiles, the flashing stopping rule, sequential and wave-based builders.

Geometry conventions (all exact integer arithmetic):

* shell 0 is the ball B(0, h_0); shell j >= 1 is the annulus
  A(r_j - h_j, r_j + h_j) with r_0 = 0 and r_{j+1} = r_j + h_j + h_{j+1};
  shells tile Z^d up to the partition's outer edge.
* Sigma_j is the outer lattice boundary of B(0, r_j) (Sigma_0 = {0});
  a walk started inside first leaves B(0, r_j) on a Sigma_j site, which
  is what makes "first hit of Sigma_j" well defined.
* the cell of an entry point z on Sigma_j is the shell intersected with
  the cone of rays through B(z, h_j / 2); membership of x is tested as
  z.x > 0 and 4 (|z|^2 |x|^2 - (z.x)^2) < h_j^2 |x|^2.

An explorer gets one flashing attempt per shell: drawing (X, Y, R) on its
(explorer, shell) decision stream, it stops at the entry point (X = 1), at
the exit of a ball around the entry point (Y = 1), or at the exit of an
annulus around Sigma_j (Y = 0), and the attempt succeeds when the stop
site lies in the entry cell.  Settled means: attempt succeeded on an
unoccupied site.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from numba import njit, uint64

from ._rng import LANE_TRAJ, RandomStream, _stream_block, flash_draw
from .idla import Cluster, FluctuationRecord, _next_chunk, ball_site_count, measure_errors
from .lattice import Region, Site, neighbors, norm2, sphere_sites
from .walk import StepCapExceeded


class InadmissibleWidths(ValueError):
    pass


class PartitionExhausted(RuntimeError):
    """An explorer crossed the outermost shell of the partition."""


class ShellCapExceeded(RuntimeError):
    """An explorer crossed more shells than allotted without settling."""


class CoveringError(AssertionError):
    """Tile construction failed a covering or overlap invariant."""


# ---------------------------------------------------------------------------
# shell partition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShellPartition:
    """Widths h_j, sphere radii r_j, and shell boundaries b_j
    (shell j = {b_j <= ||z|| < b_{j+1}}, b_{j+1} = r_j + h_j)."""

    d: int
    h: np.ndarray
    r: np.ndarray
    b: np.ndarray

    @property
    def shells(self) -> int:
        return len(self.h)

    @property
    def max_radius(self) -> int:
        return int(self.b[-1])

    def shell_index(self, z: Site) -> int:
        n2 = norm2(z)
        if n2 >= self.max_radius ** 2:
            raise ValueError(f"{z} lies beyond the partition")
        j = int(np.searchsorted(self.b * self.b, n2, side="right")) - 1
        return j

    def sigma_sites(self, j: int) -> list[Site]:
        """Sigma_j as explicit sites (lexicographic)."""
        if j == 0:
            return [(0,) * self.d]
        return sphere_sites(int(self.r[j]), self.d)

    def cell_contains(self, anchor: Site, j: int, z: Site) -> bool:
        """Exact membership of z in the cell anchored at the Sigma_j entry
        point ``anchor``."""
        n2 = norm2(z)
        b2lo = int(self.b[j]) ** 2
        b2hi = int(self.b[j + 1]) ** 2
        if not b2lo <= n2 < b2hi:
            return False
        if j == 0:
            return True  # the shell-0 cone through B(0, h_0/2) is all of R^d
        hj = int(self.h[j])
        dot = sum(a * c for a, c in zip(anchor, z))
        if dot <= 0:
            return False
        na2 = norm2(anchor)
        return 4 * (na2 * n2 - dot * dot) < hj * hj * n2

    def cell_sites(self, anchor: Site, j: int) -> list[Site]:
        """All lattice sites of the cell anchored at ``anchor`` on Sigma_j."""
        lo, hi = int(self.b[j]), int(self.b[j + 1])
        out = []
        for z in _annulus_sites(lo, hi, self.d):
            if self.cell_contains(anchor, j, z):
                out.append(z)
        return out

    def verify_sigma_separation(self, j: int) -> bool:
        """Check that Sigma_j separates inside from outside: every site at
        norm in [r_j, r_j + 1) adjacent to B(0, r_j) belongs to Sigma_j, so
        no nearest-neighbor step can cross B(0, r_j)'s boundary without
        landing on it."""
        if j == 0:
            return True
        r = int(self.r[j])
        sigma = set(self.sigma_sites(j))
        r2 = r * r
        for z in _annulus_sites(r, r + 1, self.d):
            touches = any(norm2(nb) < r2 for nb in neighbors(z))
            if touches != (z in sigma):
                return False
        return bool(sigma)


def _annulus_sites(lo: int, hi: int, d: int):
    """Sites with lo <= ||z|| < hi (norms exact)."""
    ax = np.arange(-hi, hi + 1, dtype=np.int64)
    grids = np.meshgrid(*([ax] * d), indexing="ij")
    m2 = sum(g * g for g in grids)
    mask = (m2 >= lo * lo) & (m2 < hi * hi)
    coords = np.stack([g[mask] for g in grids], axis=-1)
    return [tuple(row) for row in coords.tolist()]


def check_admissible(widths) -> None:
    """h_j <= h_{j+1} for all j, and h_{j+1} <= (1 + 1/(2j)) h_j for j >= 1
    (exact integer comparisons)."""
    for j in range(len(widths) - 1):
        if widths[j + 1] < widths[j]:
            raise InadmissibleWidths(
                f"widths must be non-decreasing (h_{j}={widths[j]}, "
                f"h_{j + 1}={widths[j + 1]})")
        if j >= 1 and 2 * j * widths[j + 1] > (2 * j + 1) * widths[j]:
            raise InadmissibleWidths(
                f"h_{j + 1}={widths[j + 1]} exceeds (1 + 1/{2 * j}) "
                f"h_{j}={widths[j]}")


def admissible_growth_widths(h0: int, count: int) -> list[int]:
    """The fastest admissible integer growth: h_{j+1} = floor((1 + 1/(2j)) h_j)."""
    ws = [h0, h0]
    for j in range(1, count - 1):
        ws.append(ws[-1] + ws[-1] // (2 * j))
    return ws[:count]


def build_partition(h0: int, rule="constant", max_radius: int = 0,
                    d: int = 2, min_h0: int = 16,
                    verify_separation: bool = True) -> ShellPartition:
    """Shells tiling B(0, max_radius).  ``rule`` is "constant" or an
    explicit admissible width sequence."""
    if h0 < min_h0:
        raise ValueError(f"h0={h0} below the minimum width {min_h0}")
    if max_radius <= h0:
        raise ValueError("max_radius must exceed h0")
    widths_seq = None
    if rule != "constant":
        widths_seq = [int(w) for w in rule]
        if widths_seq[0] != h0:
            raise ValueError("width sequence must start at h0")
        check_admissible(widths_seq)
    h_list, r_list, b_list = [], [], [0]
    r, h_prev = 0, None
    j = 0
    while b_list[-1] < max_radius:
        if widths_seq is None:
            hj = h0
        else:
            if j >= len(widths_seq):
                raise ValueError("width sequence too short for max_radius")
            hj = widths_seq[j]
        r = 0 if j == 0 else r + h_prev + hj
        h_list.append(hj)
        r_list.append(r)
        b_list.append(r + hj)
        h_prev = hj
        j += 1
    part = ShellPartition(d,
                          np.asarray(h_list, dtype=np.int64),
                          np.asarray(r_list, dtype=np.int64),
                          np.asarray(b_list, dtype=np.int64))
    if verify_separation:
        for jj in range(1, min(part.shells, 3)):
            if not part.verify_sigma_separation(jj):
                raise AssertionError(f"Sigma_{jj} does not separate")
    return part


# ---------------------------------------------------------------------------
# flashing stopping rule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlashDraw:
    """Per-(explorer, shell) randomness: X ~ Bernoulli(1/h^d) stops at the
    entry point, Y chooses ball vs annulus, R is the radius draw with
    density d r^(d-1) / h^d on [0, h]."""

    x: bool
    y: bool
    r: float


def draw_for(rng: RandomStream, explorer: int, shell: int,
             shells: ShellPartition) -> FlashDraw:
    x, y, r = rng.flash_draw(explorer, shell, int(shells.h[shell]), shells.d)
    return FlashDraw(x, y, r)


@dataclass(frozen=True)
class Cell:
    """Shell-j cell anchored at an entry point on Sigma_j."""

    anchor: Site
    j: int
    shells: ShellPartition

    def contains(self, z: Site) -> bool:
        return self.shells.cell_contains(self.anchor, self.j, z)

    def sites(self) -> list[Site]:
        return self.shells.cell_sites(self.anchor, self.j)


def flash_stop(w, draw: FlashDraw, shells: ShellPartition, j: int,
               step_cap: int = 10 ** 9):
    """Run one flashing attempt for a walker standing at its first hit of
    Sigma_j; returns (stop site, flashed).  Pure-Python reference path; the
    builders use the compiled equivalent."""
    from .walk import step

    zj = w.position
    rj = int(shells.r[j])
    hj = int(shells.h[j])
    if draw.x:
        stop = zj
    elif draw.y:
        rho = min(draw.r, rj + hj - math.sqrt(norm2(zj)))
        rho2 = rho * rho
        t = 0
        while sum((a - b) ** 2 for a, b in zip(w.position, zj)) < rho2:
            step(w)
            t += 1
            if t > step_cap:
                raise StepCapExceeded("ball exit exceeded the step cap")
        stop = w.position
    else:
        lo, hi = rj - draw.r, rj + draw.r
        lo2, hi2 = lo * lo, hi * hi
        t = 0
        while lo2 <= norm2(w.position) < hi2:
            step(w)
            t += 1
            if t > step_cap:
                raise StepCapExceeded("annulus exit exceeded the step cap")
        stop = w.position
    return stop, shells.cell_contains(zj, j, stop)


# ---------------------------------------------------------------------------
# compiled builders
# ---------------------------------------------------------------------------

_ERR_GRID = 1
_ERR_CAP = 2
_ERR_PART = 3


@njit(inline="always")
def _cell_test(j, anchor, pos, n2, hj, b2lo, b2hi, d):
    if n2 < b2lo or n2 >= b2hi:
        return False
    if j == 0:
        return True
    dot = 0
    na2 = 0
    for a in range(d):
        dot += anchor[a] * pos[a]
        na2 += anchor[a] * anchor[a]
    if dot <= 0:
        return False
    return 4 * (na2 * n2 - dot * dot) < hj * hj * n2


@njit(inline="always")
def _sigma_attempt(seed, i, j, d, pos, n2, flat, strides, word_idx, bits,
                   nbits, b, chunk_mask, nd, rj, hj, step_cap):
    """One flashing attempt from the current position (the entry point).

    Walks the trajectory stream through the stop rule; returns
    (n2, flat, word_idx, bits, nbits, t_add, ok) with the stop position
    written into ``pos``.  ok = False flags a step-cap hit."""
    x, y, radius = flash_draw(seed, i, j, hj, d)
    t = 0
    if x:
        return n2, flat, word_idx, bits, nbits, t, True
    if y:
        rho = radius
        trunc = rj + hj - math.sqrt(float(n2))
        if trunc < rho:
            rho = trunc
        rho2 = rho * rho
        dd2 = 0  # squared distance from the entry point
        rel = np.zeros(d, dtype=np.int64)
        while float(dd2) < rho2:
            c, word_idx, bits, nbits = _next_chunk(seed, i, word_idx, bits,
                                                   nbits, b, chunk_mask, nd)
            axis = c >> 1
            s = 1 - 2 * (c & 1)
            old = pos[axis]
            pos[axis] = old + s
            n2 += 2 * old * s + 1
            oldrel = rel[axis]
            rel[axis] = oldrel + s
            dd2 += 2 * oldrel * s + 1
            flat += s * strides[axis]
            t += 1
            if t > step_cap:
                return n2, flat, word_idx, bits, nbits, t, False
    else:
        lo = rj - radius
        hi = rj + radius
        lo2 = lo * lo
        hi2 = hi * hi
        while lo2 <= float(n2) < hi2:
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
                return n2, flat, word_idx, bits, nbits, t, False
    return n2, flat, word_idx, bits, nbits, t, True


@njit(cache=True)
def _flashing_seq_kernel(N, d, seed, L, h_arr, r_arr, b_arr, shell_cap,
                         step_cap, record, hist_flags, hist_sites):
    """Sequential flashing build.  Returns (sites, settle_shell, entries,
    times, error flag, offending explorer)."""
    nd = 2 * d
    bb = 1
    while (1 << bb) < nd:
        bb += 1
    chunk_mask = (1 << bb) - 1
    side = 2 * L + 1
    strides = np.empty(d, dtype=np.int64)
    strides[d - 1] = 1
    for a in range(d - 2, -1, -1):
        strides[a] = strides[a + 1] * side
    occ = np.zeros(side ** d, dtype=np.uint8)
    origin_flat = 0
    for a in range(d):
        origin_flat += L * strides[a]
    J = len(h_arr)
    sites = np.zeros((N, d), dtype=np.int64)
    entries = np.zeros((N, d), dtype=np.int64)
    settle_shell = np.full(N, -1, dtype=np.int64)
    times = np.zeros(N, dtype=np.int64)
    pos = np.empty(d, dtype=np.int64)
    anchor = np.empty(d, dtype=np.int64)
    safe2 = (L - 1) * (L - 1)
    for i in range(1, N + 1):
        for a in range(d):
            pos[a] = 0
        n2 = 0
        flat = origin_flat
        word_idx = 0
        bits = uint64(0)
        nbits = 0
        t = 0
        j = 0
        settled = False
        while not settled:
            if j >= J:
                return sites, settle_shell, entries, times, _ERR_PART, i
            if j > shell_cap:
                return sites, settle_shell, entries, times, _ERR_CAP, i
            if j > 0:
                r2 = r_arr[j] * r_arr[j]
                while n2 < r2:
                    c, word_idx, bits, nbits = _next_chunk(
                        seed, i, word_idx, bits, nbits, bb, chunk_mask, nd)
                    axis = c >> 1
                    s = 1 - 2 * (c & 1)
                    old = pos[axis]
                    pos[axis] = old + s
                    n2 += 2 * old * s + 1
                    flat += s * strides[axis]
                    t += 1
                    if t > step_cap:
                        return sites, settle_shell, entries, times, _ERR_CAP, i
            for a in range(d):
                anchor[a] = pos[a]
            n2, flat, word_idx, bits, nbits, dt, ok = _sigma_attempt(
                seed, i, j, d, pos, n2, flat, strides, word_idx, bits, nbits,
                bb, chunk_mask, nd, r_arr[j], h_arr[j], step_cap)
            t += dt
            if not ok:
                return sites, settle_shell, entries, times, _ERR_CAP, i
            if n2 >= safe2:
                return sites, settle_shell, entries, times, _ERR_GRID, i
            flashed = _cell_test(j, anchor, pos, n2, h_arr[j],
                                 b_arr[j] * b_arr[j],
                                 b_arr[j + 1] * b_arr[j + 1], d)
            if record:
                hist_flags[i - 1, j] = 1 if flashed else 0
                for a in range(d):
                    hist_sites[i - 1, j, a] = pos[a]
            if flashed and occ[flat] == 0:
                occ[flat] = 1
                for a in range(d):
                    sites[i - 1, a] = pos[a]
                    entries[i - 1, a] = anchor[a]
                settle_shell[i - 1] = j
                times[i - 1] = t
                settled = True
            j += 1
    return sites, settle_shell, entries, times, 0, 0


@njit(cache=True)
def _flashing_wave_kernel(N, d, seed, L, h_arr, r_arr, b_arr, shell_cap,
                          step_cap, trace_pos, trace_off):
    """Wave flashing build with persistent per-explorer stream cursors.

    Wave k (k = 1, 2, ...) releases unsettled explorers standing on
    Sigma_{k-1} in label order: one flashing attempt in shell k-1, then
    either settle or advance to Sigma_k.  ``trace_pos``/``trace_off``
    receive the unsettled positions after each wave (W_k data).  Returns
    (sites, settle_shell, entries, settle_wave, waves, error, explorer)."""
    nd = 2 * d
    bb = 1
    while (1 << bb) < nd:
        bb += 1
    chunk_mask = (1 << bb) - 1
    side = 2 * L + 1
    strides = np.empty(d, dtype=np.int64)
    strides[d - 1] = 1
    for a in range(d - 2, -1, -1):
        strides[a] = strides[a + 1] * side
    occ = np.zeros(side ** d, dtype=np.uint8)
    origin_flat = 0
    for a in range(d):
        origin_flat += L * strides[a]
    J = len(h_arr)
    sites = np.zeros((N, d), dtype=np.int64)
    entries = np.zeros((N, d), dtype=np.int64)
    settle_shell = np.full(N, -1, dtype=np.int64)
    settle_wave = np.full(N, -1, dtype=np.int64)
    pos = np.zeros((N + 1, d), dtype=np.int64)
    n2s = np.zeros(N + 1, dtype=np.int64)
    flats = np.full(N + 1, origin_flat, dtype=np.int64)
    words = np.zeros(N + 1, dtype=np.int64)
    bitss = np.zeros(N + 1, dtype=np.uint64)
    nbitss = np.zeros(N + 1, dtype=np.int64)
    anchor = np.empty(d, dtype=np.int64)
    mypos = np.empty(d, dtype=np.int64)
    safe2 = (L - 1) * (L - 1)
    remaining = N
    waves = 0
    cursor = 0
    trace_off[0] = 0
    while remaining > 0:
        k = waves + 1  # wave index; explorers attempt shell k-1
        j = k - 1
        if j >= J or j > shell_cap:
            err = _ERR_PART if j >= J else _ERR_CAP
            return sites, settle_shell, entries, settle_wave, waves, err, 0
        for i in range(1, N + 1):
            if settle_wave[i - 1] >= 0:
                continue
            for a in range(d):
                mypos[a] = pos[i, a]
                anchor[a] = pos[i, a]
            n2 = n2s[i]
            flat = flats[i]
            word_idx = words[i]
            bits = bitss[i]
            nbits = nbitss[i]
            n2, flat, word_idx, bits, nbits, dt, ok = _sigma_attempt(
                seed, i, j, d, mypos, n2, flat, strides, word_idx, bits,
                nbits, bb, chunk_mask, nd, r_arr[j], h_arr[j], step_cap)
            if not ok:
                return sites, settle_shell, entries, settle_wave, waves, _ERR_CAP, i
            if n2 >= safe2:
                return sites, settle_shell, entries, settle_wave, waves, _ERR_GRID, i
            flashed = _cell_test(j, anchor, mypos, n2, h_arr[j],
                                 b_arr[j] * b_arr[j],
                                 b_arr[j + 1] * b_arr[j + 1], d)
            if flashed and occ[flat] == 0:
                occ[flat] = 1
                for a in range(d):
                    sites[i - 1, a] = mypos[a]
                    entries[i - 1, a] = anchor[a]
                settle_shell[i - 1] = j
                settle_wave[i - 1] = k
                remaining -= 1
            else:
                # advance to Sigma_{k}
                if k >= J:
                    return (sites, settle_shell, entries, settle_wave, waves,
                            _ERR_PART, i)
                r2 = r_arr[k] * r_arr[k]
                t = 0
                while n2 < r2:
                    c, word_idx, bits, nbits = _next_chunk(
                        seed, i, word_idx, bits, nbits, bb, chunk_mask, nd)
                    axis = c >> 1
                    s = 1 - 2 * (c & 1)
                    old = mypos[axis]
                    mypos[axis] = old + s
                    n2 += 2 * old * s + 1
                    flat += s * strides[axis]
                    t += 1
                    if t > step_cap:
                        return (sites, settle_shell, entries, settle_wave,
                                waves, _ERR_CAP, i)
                for a in range(d):
                    pos[i, a] = mypos[a]
            n2s[i] = n2
            flats[i] = flat
            words[i] = word_idx
            bitss[i] = bits
            nbitss[i] = nbits
        # record unsettled positions after wave k
        for i in range(1, N + 1):
            if settle_wave[i - 1] < 0:
                for a in range(d):
                    trace_pos[cursor, a] = pos[i, a]
                cursor += 1
        waves += 1
        trace_off[waves] = cursor
    return sites, settle_shell, entries, settle_wave, waves, 0, 0


@njit(cache=True)
def _sigma_audit_kernel(samples, d, seed, anchor, j, rj, hj, b2lo, b2hi,
                        unit_base, step_cap):
    """``samples`` independent flashing attempts from a fixed entry point;
    returns (stop sites, flashed flags).  Sample s uses streams at unit
    unit_base + s."""
    nd = 2 * d
    bb = 1
    while (1 << bb) < nd:
        bb += 1
    chunk_mask = (1 << bb) - 1
    out = np.empty((samples, d), dtype=np.int64)
    flags = np.empty(samples, dtype=np.uint8)
    pos = np.empty(d, dtype=np.int64)
    strides = np.zeros(d, dtype=np.int64)  # unused by _sigma_attempt logic
    anc = np.empty(d, dtype=np.int64)
    for s in range(samples):
        n2 = 0
        for a in range(d):
            pos[a] = anchor[a]
            anc[a] = anchor[a]
            n2 += anchor[a] * anchor[a]
        unit = unit_base + s
        n2, _, _, _, _, _, ok = _sigma_attempt(
            seed, unit, j, d, pos, n2, 0, strides, 0, uint64(0), 0, bb,
            chunk_mask, nd, rj, hj, step_cap)
        if not ok:
            flags[s] = 2
            continue
        flags[s] = 1 if _cell_test(j, anc, pos, n2, hj, b2lo, b2hi, d) else 0
        for a in range(d):
            out[s, a] = pos[a]
    return out, flags


# ---------------------------------------------------------------------------
# python-level builders and records
# ---------------------------------------------------------------------------


@dataclass
class FlashCluster:
    """N settled flashing explorers: sites, settle shells, entry points."""

    d: int
    sites: np.ndarray  # (N, d) settle order
    settle_shell: np.ndarray
    entry_points: np.ndarray  # entry point into the settling shell
    seed: int
    shells: ShellPartition
    times: np.ndarray | None = None
    history: list | None = None  # per explorer: [(shell, stop site, flashed)]

    def __len__(self) -> int:
        return len(self.sites)

    @property
    def occupied(self) -> Region:
        return Region(map(tuple, self.sites.tolist()), d=self.d)

    def site_set(self) -> frozenset:
        return frozenset(map(tuple, self.sites.tolist()))


@dataclass
class WaveRecord:
    """State after one exploration wave: the unsettled explorer positions
    (all on Sigma_k) and the settled total so far."""

    k: int
    unsettled_positions: np.ndarray
    settled_total: int


@dataclass
class WaveTrace:
    records: list[WaveRecord]
    t_star: int  # first wave whose allowed space is not fully covered
    waves: int


def default_shell_cap(shells: ShellPartition) -> int:
    return 4 * shells.shells + 64


def experiment_partition(n: float, h0: int = 16, d: int = 2,
                         n_explorers: int | None = None) -> ShellPartition:
    """Constant-width partition sized for growing |B(0, n)| explorers: the
    per-shell no-flash probability is ~0.4, so the escape tail needs about
    ln(N)/ln(1/0.4) shells beyond n; 16 more are safety."""
    if n_explorers is None:
        n_explorers = ball_site_count(n, d)
    margin = int(math.ceil(1.3 * math.log(n_explorers + 2))) + 16
    return build_partition(h0, "constant",
                           max_radius=int(math.ceil(n)) + margin * 2 * h0,
                           d=d)


def _raise_flash_error(flag: int, explorer: int):
    if flag == _ERR_GRID:
        raise RuntimeError("flashing walk outgrew the occupancy grid")
    if flag == _ERR_CAP:
        raise ShellCapExceeded(f"explorer {explorer} exceeded the shell/step cap")
    if flag == _ERR_PART:
        raise PartitionExhausted(f"explorer {explorer} crossed the outermost shell")


def grow_flashing(N: int, shells: ShellPartition, rng: RandomStream,
                  record_history: bool = False,
                  step_cap: int = 10 ** 10) -> FlashCluster:
    """Sequential flashing cluster of N sites; explorer i's trajectory uses
    stream unit i, its shell decisions the (i, shell) decision blocks."""
    if N < 0:
        raise ValueError("N must be non-negative")
    d = shells.d
    if N == 0:
        z = np.zeros((0, d), dtype=np.int64)
        return FlashCluster(d, z, np.zeros(0, dtype=np.int64), z.copy(),
                            rng.seed, shells, np.zeros(0, dtype=np.int64))
    L = shells.max_radius + 2
    cap = default_shell_cap(shells)
    if record_history:
        hist_flags = np.full((N, shells.shells), -1, dtype=np.int8)
        hist_sites = np.zeros((N, shells.shells, d), dtype=np.int64)
    else:
        hist_flags = np.full((1, 1), -1, dtype=np.int8)
        hist_sites = np.zeros((1, 1, d), dtype=np.int64)
    sites, settle_shell, entries, times, flag, expl = _flashing_seq_kernel(
        N, d, rng.seed, L, shells.h, shells.r, shells.b, cap, step_cap,
        record_history, hist_flags, hist_sites)
    _raise_flash_error(flag, expl)
    history = None
    if record_history:
        history = []
        for i in range(N):
            row = []
            for j in range(shells.shells):
                if hist_flags[i, j] < 0:
                    break
                row.append((j, tuple(hist_sites[i, j].tolist()),
                            bool(hist_flags[i, j])))
            history.append(row)
    return FlashCluster(d, sites, settle_shell, entries, rng.seed, shells,
                        times, history)


def grow_flashing_waves(N: int, shells: ShellPartition, rng: RandomStream,
                        step_cap: int = 10 ** 10):
    """Wave construction: identical cluster to grow_flashing under the same
    streams; returns (FlashCluster, WaveTrace)."""
    if N < 0:
        raise ValueError("N must be non-negative")
    d = shells.d
    if N == 0:
        z = np.zeros((0, d), dtype=np.int64)
        cl = FlashCluster(d, z, np.zeros(0, dtype=np.int64), z.copy(),
                          rng.seed, shells)
        return cl, WaveTrace([], t_star=1, waves=0)
    L = shells.max_radius + 2
    cap = default_shell_cap(shells)
    trace_pos = np.zeros((N * (shells.shells + 2), d), dtype=np.int64)
    trace_off = np.zeros(shells.shells + 2, dtype=np.int64)
    sites, settle_shell, entries, settle_wave, waves, flag, expl = \
        _flashing_wave_kernel(N, d, rng.seed, L, shells.h, shells.r,
                              shells.b, cap, step_cap, trace_pos, trace_off)
    _raise_flash_error(flag, expl)
    cluster = FlashCluster(d, sites, settle_shell, entries, rng.seed, shells)
    records = []
    norms2 = (sites.astype(np.int64) ** 2).sum(axis=1)
    for k in range(1, waves + 1):
        seg = trace_pos[trace_off[k - 1]:trace_off[k]]
        records.append(WaveRecord(k, seg.copy(),
                                  int((settle_wave <= k).sum())))
    t_star = waves + 1  # bounded clusters always leave the next shell short
    for k in range(1, waves + 2):
        b_k = int(shells.b[min(k, shells.shells)]) if k <= shells.shells else None
        if b_k is None:
            break
        want = ball_site_count(b_k, d)
        have = int(((settle_wave <= k) & (settle_wave > 0)
                    & (norms2 < b_k * b_k)).sum())
        if have < want:
            t_star = k
            break
    return cluster, WaveTrace(records, t_star=t_star, waves=waves)


def measure_flash_errors(cluster: FlashCluster, n: float) -> FluctuationRecord:
    """Inner/outer errors of a flashing cluster (same convention as the
    aggregate measurement)."""
    proxy = Cluster(cluster.d, cluster.sites,
                    cluster.times if cluster.times is not None
                    else np.zeros(len(cluster), dtype=np.int64),
                    cluster.seed)
    return measure_errors(proxy, n)


def sigma_stop_samples(shells: ShellPartition, anchor: Site, j: int,
                       samples: int, rng: RandomStream,
                       step_cap: int = 10 ** 9):
    """Monte Carlo over the flashing attempt from a fixed Sigma_j entry
    point: (stop sites, flashed flags)."""
    anchor_arr = np.asarray(anchor, dtype=np.int64)
    b2lo = int(shells.b[j]) ** 2
    b2hi = int(shells.b[j + 1]) ** 2
    sites, flags = _sigma_audit_kernel(samples, shells.d, rng.seed,
                                       anchor_arr, j, int(shells.r[j]),
                                       int(shells.h[j]), b2lo, b2hi,
                                       rng.unit, step_cap)
    if (flags == 2).any():
        raise StepCapExceeded("sigma attempt exceeded the step cap")
    return sites, flags.astype(bool)


# ---------------------------------------------------------------------------
# tiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Tile:
    """Intersection of a shrunken cell with Sigma_j."""

    anchor: Site
    j: int
    sites: tuple


@dataclass
class TileSet:
    j: int
    eps0: Fraction
    tiles: list[Tile]
    k_f: int  # measured max overlap of shrunken cells over the shell
    shells: ShellPartition

    def tile_of_sites(self) -> dict[Site, list[int]]:
        """site on Sigma_j -> indices of tiles containing it."""
        out: dict[Site, list[int]] = {}
        for idx, t in enumerate(self.tiles):
            for s in t.sites:
                out.setdefault(s, []).append(idx)
        return out


def _shrunken_cone_contains(anchor: Site, z: Site, eps_h_num: int,
                            eps_h_den: int) -> bool:
    """z on the ray cone of half-width (eps_h_num/eps_h_den) around anchor."""
    dot = sum(a * c for a, c in zip(anchor, z))
    if dot <= 0:
        return False
    na2 = norm2(anchor)
    nz2 = norm2(z)
    return (eps_h_den ** 2) * (na2 * nz2 - dot * dot) < (eps_h_num ** 2) * nz2


def build_tiles(shells: ShellPartition, j: int,
                eps0: Fraction = Fraction(1, 8),
                exhaustive_limit: int = 32,
                sample_rng: RandomStream | None = None,
                sample_size: int = 4000) -> TileSet:
    """Tiles of Sigma_j: anchors form a greedy maximal packing at pairwise
    distance >= eps0 h_j / 2 (lexicographic scan); covering, bounded
    overlap, and the common-cell (coupon) property are verified
    exhaustively for h_j <= exhaustive_limit, on a sample beyond."""
    if j < 1:
        raise ValueError("tiles are defined for shells j >= 1")
    eps0 = Fraction(eps0)
    hj = int(shells.h[j])
    if 1 + 2 * eps0 * hj > Fraction(hj, 2):
        raise ValueError(f"eps0={eps0} violates 1 + 2 eps0 h <= h/2 at h={hj}")
    sigma = shells.sigma_sites(j)
    # greedy maximal packing at squared distance >= (eps0 h / 2)^2
    pack2 = (eps0 * hj / 2) ** 2
    anchors: list[Site] = []
    for z in sigma:
        if all(dist2_int(z, a) * pack2.denominator >= pack2.numerator
               for a in anchors):
            anchors.append(z)
    eps_h = eps0 * hj
    num, den = eps_h.numerator, eps_h.denominator
    tiles = []
    for a in anchors:
        ts = tuple(s for s in sigma if _shrunken_cone_contains(a, s, num, den))
        tiles.append(Tile(a, j, ts))
    covered = set()
    for t in tiles:
        covered.update(t.sites)
    missing = [s for s in sigma if s not in covered]
    if missing:
        raise CoveringError(f"{len(missing)} Sigma_{j} sites uncovered, "
                            f"first {missing[0]}")
    shell_sites = _annulus_sites(int(shells.b[j]), int(shells.b[j + 1]),
                                 shells.d)
    if hj <= exhaustive_limit:
        check_sites = shell_sites
    else:
        rng = sample_rng or RandomStream(0x7114E5)
        idx = sorted({int(rng.uniform() * len(shell_sites))
                      for _ in range(sample_size)})
        check_sites = [shell_sites[i] for i in idx]
    k_f = 0
    for z in check_sites:
        c = sum(1 for a in anchors if _shrunken_cone_contains(a, z, num, den))
        k_f = max(k_f, c)
        if c == 0 and int(shells.b[j]) ** 2 <= norm2(z):
            # shrunken cells must cover the whole shell
            raise CoveringError(f"shell site {z} in no shrunken cell")
    tileset = TileSet(j, eps0, tiles, k_f, shells)
    _verify_coupon_property(tileset, check_sites)
    return tileset


def dist2_int(a: Site, b: Site) -> int:
    return sum((x - y) * (x - y) for x, y in zip(a, b))


def _verify_coupon_property(tileset: TileSet, check_sites) -> None:
    """Every shell site must admit an anchor whose whole tile can flash
    onto it: z in the cell of every site of that tile."""
    shells = tileset.shells
    j = tileset.j
    for z in check_sites:
        ok = False
        for t in tileset.tiles:
            if all(shells.cell_contains(y, j, z) for y in t.sites):
                ok = True
                break
        if not ok:
            raise CoveringError(f"no tile covers {z} in the coupon sense")


def tile_hit_probabilities(shells: ShellPartition, tileset: TileSet,
                           starts: list[Site], samples: int,
                           rng: RandomStream) -> np.ndarray:
    """Empirical P_z(S(H(Sigma_j)) in T) for each start z and tile T, via
    exits of B(0, r_j) (they land exactly on Sigma_j)."""
    from .lattice import enumerate_ball
    from .walk import exit_samples

    j = tileset.j
    ball = enumerate_ball((0,) * shells.d, int(shells.r[j]))
    site_to_tiles = tileset.tile_of_sites()
    out = np.zeros((len(starts), len(tileset.tiles)))
    for si, z in enumerate(starts):
        sites, _ = exit_samples(ball, z, samples,
                                rng.child(unit=rng.unit + si * samples))
        for row in sites.tolist():
            for ti in site_to_tiles.get(tuple(row), ()):
                out[si, ti] += 1.0
    return out / samples
