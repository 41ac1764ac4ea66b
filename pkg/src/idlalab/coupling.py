"""Coupling of internal DLA with the flashing process on shared increments.

One shared increment stream drives everything, strictly in program order.
Loop 1 builds the aggregate A(1..N): while walker i sits inside A(i-1),
each increment extends both the walker and one flashing trajectory chosen
by the hand-off rule (on a site whose stored occupant is not at a flashing
time, the active label is handed to the occupant and the site turns blue;
on a blue site both flash and the larger label walks on).  Loop 2 then
completes every flashing trajectory from where loop 1 left it, settling
explorer k at its first flashing time outside A*(k-1).

Structural invariants are asserted inside the build and abort loudly:
after walker i settles, the stopped flashing explorers 1..i occupy exactly
the i sites of A(i) (one each), and the hand-off target is always the
unique co-occupant.  Times only ever grow, which is the pathwise ordering
tau*_k >= tbar_k.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np
from numba import njit, uint64

from ._rng import LANE_SHARED, RandomStream, flash_draw
from .flashing import FlashCluster, PartitionExhausted, ShellPartition, _cell_test
from .idla import Cluster, _next_chunk
from .lattice import Site, norm2
from .walk import StepCapExceeded

_ERR_GRID = 1
_ERR_CAP = 2
_ERR_PART = 3
_ERR_HANDOFF = 5
_ERR_REMARK_B = 6

_AWAIT = 0
_BALL = 1
_ANN = 2


@njit(inline="always")
def _flash_arrival(k, d, seed, J, h_arr, r_arr, b_arr, pos, n2, mode, shellp,
                   anchor, anc_n2, rel, dd2, rho2, lo2, hi2, flashing):
    """Update explorer k's flashing-time state after its position changed
    (or at creation).  Returns False if the partition is exhausted."""
    m = shellp[k]
    md = mode[k]
    if md == _AWAIT:
        if m >= J:
            return False
        rm = r_arr[m]
        if n2[k] >= rm * rm:
            # first hit of Sigma_m: draw the shell decision
            for a in range(d):
                anchor[k, a] = pos[k, a]
            anc_n2[k] = n2[k]
            x, y, radius = flash_draw(seed, k, m, h_arr[m], d)
            if x:
                flashing[k] = 1
                shellp[k] = m + 1
            elif y:
                trunc = rm + h_arr[m] - math.sqrt(float(n2[k]))
                rho = radius if radius < trunc else trunc
                rho2[k] = rho * rho
                dd2[k] = 0
                for a in range(d):
                    rel[k, a] = 0
                if rho2[k] <= 0.0:
                    flashing[k] = 1  # sigma = 0, stop at the entry point
                    shellp[k] = m + 1
                else:
                    mode[k] = _BALL
                    flashing[k] = 0
            else:
                lo = rm - radius
                hi = rm + radius
                lo2[k] = lo * lo
                hi2[k] = hi * hi
                fn2 = float(n2[k])
                if lo2[k] <= fn2 < hi2[k]:
                    mode[k] = _ANN
                    flashing[k] = 0
                else:
                    flashing[k] = 1  # already outside: sigma = 0 at entry
                    shellp[k] = m + 1
        else:
            flashing[k] = 0
    elif md == _BALL:
        if float(dd2[k]) >= rho2[k]:
            ok = _cell_test(m, anchor[k], pos[k], n2[k], h_arr[m],
                            b_arr[m] * b_arr[m], b_arr[m + 1] * b_arr[m + 1],
                            d)
            flashing[k] = 1 if ok else 0
            mode[k] = _AWAIT
            shellp[k] = m + 1
        else:
            flashing[k] = 0
    else:
        fn2 = float(n2[k])
        if fn2 < lo2[k] or fn2 >= hi2[k]:
            ok = _cell_test(m, anchor[k], pos[k], n2[k], h_arr[m],
                            b_arr[m] * b_arr[m], b_arr[m + 1] * b_arr[m + 1],
                            d)
            flashing[k] = 1 if ok else 0
            mode[k] = _AWAIT
            shellp[k] = m + 1
        else:
            flashing[k] = 0
    return True


@njit(cache=True)
def _coupled_kernel(N, d, seed, L, h_arr, r_arr, b_arr, step_cap):
    """Both loops of the coupled construction.  Returns
    (a_sites, a_times, loop1_sites, colors, tbar, astar_sites, entry,
    settle_shell, taustar, increments, error, who)."""
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
    origin_flat = 0
    for a in range(d):
        origin_flat += L * strides[a]
    J = len(h_arr)
    occ_a = np.full(side ** d, -1, dtype=np.int32)  # site -> occupant label
    occ_b = np.zeros(side ** d, dtype=np.uint8)
    pos = np.zeros((N + 1, d), dtype=np.int64)
    n2 = np.zeros(N + 1, dtype=np.int64)
    flat = np.full(N + 1, origin_flat, dtype=np.int64)
    t = np.zeros(N + 1, dtype=np.int64)
    mode = np.zeros(N + 1, dtype=np.int8)
    shellp = np.zeros(N + 1, dtype=np.int64)
    anchor = np.zeros((N + 1, d), dtype=np.int64)
    anc_n2 = np.zeros(N + 1, dtype=np.int64)
    rel = np.zeros((N + 1, d), dtype=np.int64)
    dd2 = np.zeros(N + 1, dtype=np.int64)
    rho2 = np.zeros(N + 1, dtype=np.float64)
    lo2 = np.zeros(N + 1, dtype=np.float64)
    hi2 = np.zeros(N + 1, dtype=np.float64)
    flashing = np.zeros(N + 1, dtype=np.uint8)
    a_sites = np.zeros((N, d), dtype=np.int64)
    a_times = np.zeros(N, dtype=np.int64)
    loop1_sites = np.zeros((N, d), dtype=np.int64)
    colors = np.zeros(N, dtype=np.uint8)
    tbar = np.zeros(N + 1, dtype=np.int64)
    astar_sites = np.zeros((N, d), dtype=np.int64)
    entry = np.zeros((N, d), dtype=np.int64)
    settle_shell = np.full(N, -1, dtype=np.int64)
    taustar = np.zeros(N + 1, dtype=np.int64)
    word_idx = 0
    bits = uint64(0)
    nbits = 0
    increments = 0
    safe2 = (L - 1) * (L - 1)
    count = 0
    # ---- loop 1: build A(1..N), extending flashing trajectories
    for i in range(1, N + 1):
        # create walker i and flashing explorer i at the origin (time 0)
        if not _flash_arrival(i, d, seed, J, h_arr, r_arr, b_arr, pos, n2,
                              mode, shellp, anchor, anc_n2, rel, dd2, rho2,
                              lo2, hi2, flashing):
            return (a_sites, a_times, loop1_sites, colors, tbar, astar_sites,
                    entry, settle_shell, taustar, increments, _ERR_PART, i)
        j = i
        tw = 0
        while occ_a[flat[j]] >= 0:
            if flashing[j] == 1:
                jp = occ_a[flat[j]]
                if jp < 1 or jp == j or flat[jp] != flat[j]:
                    return (a_sites, a_times, loop1_sites, colors, tbar,
                            astar_sites, entry, settle_shell, taustar,
                            increments, _ERR_HANDOFF, i)
                if flashing[jp] == 0:
                    # red site: store j here (it turns blue), walk on as jp
                    occ_a[flat[j]] = j
                    j = jp
                else:
                    # blue site: both flash; the larger label walks on
                    if j > jp:
                        occ_a[flat[j]] = jp
                    else:
                        occ_a[flat[j]] = j
                        j = jp
            c, word_idx, bits, nbits = _next_chunk(seed, 0, word_idx, bits,
                                                   nbits, bb, chunk_mask, nd,
                                                   LANE_SHARED)
            axis = c >> 1
            s = 1 - 2 * (c & 1)
            old = pos[j, axis]
            pos[j, axis] = old + s
            n2[j] += 2 * old * s + 1
            flat[j] += s * strides[axis]
            if mode[j] == _BALL:
                oldr = rel[j, axis]
                rel[j, axis] = oldr + s
                dd2[j] += 2 * oldr * s + 1
            t[j] += 1
            tw += 1
            increments += 1
            if n2[j] >= safe2:
                return (a_sites, a_times, loop1_sites, colors, tbar,
                        astar_sites, entry, settle_shell, taustar,
                        increments, _ERR_GRID, i)
            if t[j] > step_cap:
                return (a_sites, a_times, loop1_sites, colors, tbar,
                        astar_sites, entry, settle_shell, taustar,
                        increments, _ERR_CAP, i)
            if not _flash_arrival(j, d, seed, J, h_arr, r_arr, b_arr, pos,
                                  n2, mode, shellp, anchor, anc_n2, rel, dd2,
                                  rho2, lo2, hi2, flashing):
                return (a_sites, a_times, loop1_sites, colors, tbar,
                        astar_sites, entry, settle_shell, taustar,
                        increments, _ERR_PART, i)
        # walker i settled; the active flashing explorer is stored here
        occ_a[flat[j]] = j
        count += 1
        for a in range(d):
            a_sites[i - 1, a] = pos[j, a]
        a_times[i - 1] = tw
        # remark (b): explorers 1..i each own the site they stand on
        if count != i:
            return (a_sites, a_times, loop1_sites, colors, tbar, astar_sites,
                    entry, settle_shell, taustar, increments, _ERR_REMARK_B, i)
        for k in range(1, i + 1):
            if occ_a[flat[k]] != k:
                return (a_sites, a_times, loop1_sites, colors, tbar,
                        astar_sites, entry, settle_shell, taustar,
                        increments, _ERR_REMARK_B, i)
    for k in range(1, N + 1):
        tbar[k] = t[k]
        for a in range(d):
            loop1_sites[k - 1, a] = pos[k, a]
        colors[k - 1] = flashing[k]
    # ---- loop 2: complete the flashing trajectories
    for k in range(1, N + 1):
        while flashing[k] == 0 or occ_b[flat[k]] == 1:
            c, word_idx, bits, nbits = _next_chunk(seed, 0, word_idx, bits,
                                                   nbits, bb, chunk_mask, nd,
                                                   LANE_SHARED)
            axis = c >> 1
            s = 1 - 2 * (c & 1)
            old = pos[k, axis]
            pos[k, axis] = old + s
            n2[k] += 2 * old * s + 1
            flat[k] += s * strides[axis]
            if mode[k] == _BALL:
                oldr = rel[k, axis]
                rel[k, axis] = oldr + s
                dd2[k] += 2 * oldr * s + 1
            t[k] += 1
            increments += 1
            if n2[k] >= safe2:
                return (a_sites, a_times, loop1_sites, colors, tbar,
                        astar_sites, entry, settle_shell, taustar,
                        increments, _ERR_GRID, k)
            if t[k] > step_cap:
                return (a_sites, a_times, loop1_sites, colors, tbar,
                        astar_sites, entry, settle_shell, taustar,
                        increments, _ERR_CAP, k)
            if not _flash_arrival(k, d, seed, J, h_arr, r_arr, b_arr, pos,
                                  n2, mode, shellp, anchor, anc_n2, rel, dd2,
                                  rho2, lo2, hi2, flashing):
                return (a_sites, a_times, loop1_sites, colors, tbar,
                        astar_sites, entry, settle_shell, taustar,
                        increments, _ERR_PART, k)
        occ_b[flat[k]] = 1
        for a in range(d):
            astar_sites[k - 1, a] = pos[k, a]
            entry[k - 1, a] = anchor[k, a]
        settle_shell[k - 1] = shellp[k] - 1
        taustar[k] = t[k]
    return (a_sites, a_times, loop1_sites, colors, tbar, astar_sites, entry,
            settle_shell, taustar, increments, 0, 0)


@dataclass
class CouplingReport:
    """Per-explorer record of the coupled build plus verification results."""

    N: int
    d: int
    seed: int
    t_bar: np.ndarray  # (N,) flashing-trajectory times at the end of loop 1
    tau_star: np.ndarray  # (N,) settle times of the flashing explorers
    loop1_sites: np.ndarray  # (N, d) S*_k(tbar_k); these are exactly A(N)
    settle_sites: np.ndarray  # (N, d) S*_k(tau*_k); these are exactly A*(N)
    colors: np.ndarray  # (N,) 1 = blue (stopped at a flashing time)
    increments: int  # shared-stream direction draws consumed

    @property
    def lemma1_ok(self) -> bool:
        """tau*_k >= tbar_k for every explorer (pathwise, exact)."""
        return bool((self.tau_star >= self.t_bar).all())

    @property
    def psi_bijection_ok(self) -> bool:
        """psi_N maps the N distinct sites of A(N) onto the N distinct
        sites of A*(N)."""
        a = {tuple(r) for r in self.loop1_sites.tolist()}
        b = {tuple(r) for r in self.settle_sites.tolist()}
        return len(a) == self.N and len(b) == self.N

    @property
    def stream_conservation_ok(self) -> bool:
        """Every shared increment landed in exactly one flashing trajectory."""
        return self.increments == int(self.tau_star.sum())

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "d": self.d,
            "seed": self.seed,
            "t_bar": self.t_bar.tolist(),
            "tau_star": self.tau_star.tolist(),
            "loop1_sites": self.loop1_sites.tolist(),
            "settle_sites": self.settle_sites.tolist(),
            "colors": self.colors.tolist(),
            "increments": self.increments,
            "lemma1_ok": self.lemma1_ok,
            "psi_bijection_ok": self.psi_bijection_ok,
            "stream_conservation_ok": self.stream_conservation_ok,
        }


def run_coupled(N: int, shells: ShellPartition, rng: RandomStream,
                step_cap: int = 10 ** 10):
    """Run the coupled construction; returns (Cluster, FlashCluster,
    CouplingReport).  The walker increments come from the single stream
    (seed, unit 0, shared lane) in program order; flashing decisions come
    from the same per-(explorer, shell) blocks the standalone builder uses."""
    if N < 0:
        raise ValueError("N must be non-negative")
    d = shells.d
    if N == 0:
        z = np.zeros((0, d), dtype=np.int64)
        zi = np.zeros(0, dtype=np.int64)
        return (Cluster(d, z, zi, rng.seed),
                FlashCluster(d, z.copy(), zi.copy(), z.copy(), rng.seed,
                             shells),
                CouplingReport(0, d, rng.seed, zi, zi, z, z,
                               np.zeros(0, dtype=np.uint8), 0))
    L = shells.max_radius + 2
    (a_sites, a_times, loop1_sites, colors, tbar, astar_sites, entry,
     settle_shell, taustar, increments, err, who) = _coupled_kernel(
        N, d, rng.seed, L, shells.h, shells.r, shells.b, step_cap)
    if err == _ERR_GRID:
        raise RuntimeError("coupled walk outgrew the occupancy grid")
    if err == _ERR_CAP:
        raise StepCapExceeded(f"explorer {who} exceeded the step cap")
    if err == _ERR_PART:
        raise PartitionExhausted(f"explorer {who} crossed the outermost shell")
    if err == _ERR_HANDOFF:
        raise AssertionError(f"hand-off uniqueness violated at walker {who}")
    if err == _ERR_REMARK_B:
        raise AssertionError(f"loop invariant A(i) = {{S*_k(t_k)}} failed "
                             f"at walker {who}")
    cluster = Cluster(d, a_sites, a_times, rng.seed)
    flash = FlashCluster(d, astar_sites, settle_shell, entry, rng.seed,
                         shells)
    report = CouplingReport(N, d, rng.seed, tbar[1:].copy(),
                            taustar[1:].copy(), loop1_sites, astar_sites,
                            colors, int(increments))
    return cluster, flash, report


def check_desired_monotonicity(report: CouplingReport,
                               shells: ShellPartition) -> bool:
    """The shell-monotone property behind the corollary: for every explorer
    and every threshold b_l, if S*_k(tbar_k) lies at norm >= b_l then so
    does its settle site."""
    b2 = [int(x) * int(x) for x in shells.b]
    for x, y in zip(report.loop1_sites.tolist(),
                    report.settle_sites.tolist()):
        if bisect_right(b2, norm2(tuple(x))) > bisect_right(b2, norm2(tuple(y))):
            return False
    return True


@dataclass
class CorollaryCheck:
    k: int
    threshold: int  # the ball radius r_k + h_k
    containment_applicable: bool  # A*(N) inside the ball?
    containment_ok: bool
    coverage_applicable: bool  # ball inside A*(N)?
    coverage_ok: bool

    @property
    def ok(self) -> bool:
        return self.containment_ok and self.coverage_ok


def _min_uncovered_norm2(sites: np.ndarray, d: int) -> int:
    """Smallest squared norm of a lattice site not in ``sites``."""
    occupied = {tuple(r) for r in sites.tolist()}
    reach = 1
    while True:
        ax = np.arange(-reach, reach + 1, dtype=np.int64)
        grids = np.meshgrid(*([ax] * d), indexing="ij")
        m2 = sum(g * g for g in grids)
        order = np.argsort(m2, axis=None, kind="stable")
        coords = np.stack([g.ravel()[order] for g in grids], axis=-1)
        m2s = m2.ravel()[order]
        for row, v in zip(coords.tolist(), m2s.tolist()):
            if v > reach * reach:
                break  # only trust norms fully inside the scanned box
            if tuple(row) not in occupied:
                return int(v)
        reach *= 2


def check_corollary(report: CouplingReport,
                    shells: ShellPartition) -> list[CorollaryCheck]:
    """Both inclusion transfers at every shell index: if A*(N) is contained
    in B(0, r_k + h_k) so is A(N); if A*(N) covers that ball so does A(N)."""
    a_max2 = int((report.loop1_sites.astype(np.int64) ** 2).sum(axis=1).max()) \
        if report.N else 0
    s_max2 = int((report.settle_sites.astype(np.int64) ** 2).sum(axis=1).max()) \
        if report.N else 0
    a_min_unc2 = _min_uncovered_norm2(report.loop1_sites, report.d)
    s_min_unc2 = _min_uncovered_norm2(report.settle_sites, report.d)
    out = []
    for k in range(shells.shells):
        thr = int(shells.r[k] + shells.h[k])  # = b_{k+1}
        t2 = thr * thr
        star_inside = s_max2 < t2
        cont_ok = (not star_inside) or (a_max2 < t2)
        star_covers = s_min_unc2 >= t2
        cov_ok = (not star_covers) or (a_min_unc2 >= t2)
        out.append(CorollaryCheck(k, thr, star_inside, cont_ok, star_covers,
                                  cov_ok))
    return out
