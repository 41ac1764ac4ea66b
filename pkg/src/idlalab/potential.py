"""Exact discrete potential theory on lattice balls.

This is the numerical oracle: restricted Green's functions via linear
solves, exit laws through the classical one-step decomposition, expected
exit times through the squared-norm martingale, and the asymptotic
whole-space kernels they are checked against.

Two realizations share one contract (residual of the defining system
``(I - P) g = b`` at most RESIDUAL_TOL in sup norm, checked after every
solve):

* ``GreenTable`` -- the full dense table for regions up to 2e4 sites;
* ``BallSystem`` -- sparse column/occupation solves on balls of any size
  the acceptance checks need (direct LU when small, AMG-accelerated CG
  when large).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .lattice import Region, Site, neighbors, norm2

RESIDUAL_TOL = 1e-10
MAX_DENSE_SITES = 20_000
_SPARSE_DIRECT_LIMIT = 30_000

EULER_GAMMA = 0.5772156649015328606


class RegionTooLarge(ValueError):
    pass


class SolverDidNotConverge(RuntimeError):
    pass


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def green_asymptotic(z: Site, d: int | None = None) -> float:
    """First-order whole-space kernel: C_d / ||z||^(d-2) for d >= 3, the
    potential kernel (2/pi) log ||z|| + (2*gamma + log 8)/pi for d = 2."""
    z = tuple(z)
    d = len(z) if d is None else d
    n2 = norm2(z)
    if n2 == 0:
        raise ValueError("asymptotic kernel undefined at the origin")
    r = math.sqrt(n2)
    if d == 2:
        return (2.0 / math.pi) * math.log(r) + (2 * EULER_GAMMA + math.log(8)) / math.pi
    cd = 2.0 / (unit_ball_volume(d) * (d - 2))
    return cd / r ** (d - 2)


# ---------------------------------------------------------------------------
# dense table
# ---------------------------------------------------------------------------


class GreenTable:
    """Dense restricted Green's function on a finite region.

    G[x, y] = expected visits to y before exiting the region, for a walk
    started at x.  Symmetric, non-negative, residual-checked.
    """

    def __init__(self, region: Region, G: np.ndarray, residual: float):
        self.region = region
        self.sites: list[Site] = list(region)
        self.index = {s: i for i, s in enumerate(self.sites)}
        self.G = G
        self.residual = residual
        self.d = region.d
        self._boundary: list[Site] | None = None

    def value(self, x: Site, y: Site) -> float:
        return float(self.G[self.index[tuple(x)], self.index[tuple(y)]])

    def expected_exit_time(self, z: Site) -> float:
        """E_z[H(region^c)] = sum_y G(z, y)."""
        return float(self.G[self.index[tuple(z)]].sum())

    @property
    def boundary_sites(self) -> list[Site]:
        if self._boundary is None:
            self._boundary = sorted(self.region.boundary())
        return self._boundary

    def exit_law(self, y: Site) -> dict[Site, float]:
        """P_y(S(H) = z*) for z* on the outer boundary, via the one-step
        decomposition P_y(exit at z*) = (1/2d) * sum_{z ~ z*, z in region} G(y, z)."""
        row = self.G[self.index[tuple(y)]]
        law = {}
        inv2d = 1.0 / (2 * self.d)
        for zstar in self.boundary_sites:
            acc = 0.0
            for z in neighbors(zstar):
                i = self.index.get(z)
                if i is not None:
                    acc += row[i]
            law[zstar] = acc * inv2d
        return law

    def exit_law_matrix(self) -> tuple[list[Site], np.ndarray]:
        """(boundary sites, matrix P[i, j] = P_{sites[i]}(exit at boundary[j]))."""
        bnd = self.boundary_sites
        M = np.zeros((len(self.sites), len(bnd)))
        inv2d = 1.0 / (2 * self.d)
        for j, zstar in enumerate(bnd):
            for z in neighbors(zstar):
                i = self.index.get(z)
                if i is not None:
                    M[:, j] += self.G[:, i]
        return bnd, M * inv2d


def _transition_matrix(region: Region) -> sp.csr_matrix:
    sites = list(region)
    index = {s: i for i, s in enumerate(sites)}
    rows, cols = [], []
    for i, z in enumerate(sites):
        for nb in neighbors(z):
            j = index.get(nb)
            if j is not None:
                rows.append(i)
                cols.append(j)
    n = len(sites)
    data = np.full(len(rows), 1.0 / (2 * region.d))
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def solve_green(region: Region, max_sites: int = MAX_DENSE_SITES) -> GreenTable:
    """Dense G for a finite region: solve (I - P) G = I and verify the
    symmetry / non-negativity / residual invariants."""
    n = len(region)
    if n == 0:
        raise ValueError("empty region")
    if n > max_sites:
        raise RegionTooLarge(f"{n} sites exceeds the dense budget {max_sites}")
    P = _transition_matrix(region)
    A = (sp.eye(n, format="csr") - P).toarray()
    G = scipy.linalg.solve(A, np.eye(n), assume_a="pos")
    residual = float(np.abs(A @ G - np.eye(n)).max())
    if residual > RESIDUAL_TOL:
        raise SolverDidNotConverge(f"residual {residual:.3e} > {RESIDUAL_TOL}")
    asym = float(np.abs(G - G.T).max())
    if asym > RESIDUAL_TOL:
        raise SolverDidNotConverge(f"asymmetry {asym:.3e} > {RESIDUAL_TOL}")
    G = 0.5 * (G + G.T)
    if G.min() < -RESIDUAL_TOL:
        raise SolverDidNotConverge(f"negative entry {G.min():.3e}")
    return GreenTable(region, G, residual)


# ---------------------------------------------------------------------------
# sparse ball systems
# ---------------------------------------------------------------------------


def ball_grid(n: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """(sites, index_grid) for B(0, n): sites is (N, d) int64 in grid scan
    order, index_grid maps box coordinates (offset by n) to site index or -1."""
    ax = np.arange(-n, n + 1, dtype=np.int64)
    grids = np.meshgrid(*([ax] * d), indexing="ij")
    m2 = sum(g * g for g in grids)
    mask = m2 < n * n
    sites = np.stack([g[mask] for g in grids], axis=-1)
    index = -np.ones(mask.shape, dtype=np.int64)
    index[mask] = np.arange(len(sites))
    return sites, index


class BallSystem:
    """Sparse (I - P) system on B(0, n); column and occupation solves.

    Solves are direct (sparse LU) below _SPARSE_DIRECT_LIMIT sites and
    AMG-preconditioned CG above it; either way the sup-norm residual is
    verified against RESIDUAL_TOL (relative to the sup of the right side).
    """

    def __init__(self, n: int, d: int):
        self.n = n
        self.d = d
        self.sites, self.index = ball_grid(n, d)
        self.N = len(self.sites)
        self.norms2 = (self.sites ** 2).sum(axis=1)
        rows, cols = [], []
        for axis in range(d):
            for s in (1, -1):
                nb = np.roll(self.index, -s, axis=axis)
                m = (self.index >= 0) & (nb >= 0)
                rows.append(self.index[m])
                cols.append(nb[m])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        data = np.full(len(rows), 1.0 / (2 * d))
        P = sp.csr_matrix((data, (rows, cols)), shape=(self.N, self.N))
        self.A = (sp.eye(self.N, format="csr") - P).tocsr()
        self._lu = None
        self._amg = None

    def site_id(self, z: Site) -> int:
        i = self.index[tuple(c + self.n for c in z)]
        if i < 0:
            raise ValueError(f"{z} is not in B(0, {self.n})")
        return int(i)

    def solve(self, b: np.ndarray) -> np.ndarray:
        scale = max(1.0, float(np.abs(b).max()))
        if self.N <= _SPARSE_DIRECT_LIMIT:
            if self._lu is None:
                self._lu = spla.splu(self.A.tocsc())
            x = self._lu.solve(b)
        else:
            import pyamg

            if self._amg is None:
                self._amg = pyamg.smoothed_aggregation_solver(self.A, max_coarse=500)
            x = self._amg.solve(b, tol=1e-12, accel="cg", maxiter=300)
            for _ in range(3):
                r = b - self.A @ x
                if np.abs(r).max() <= RESIDUAL_TOL * scale:
                    break
                x = x + self._amg.solve(r, tol=1e-12, accel="cg", maxiter=300)
        residual = float(np.abs(self.A @ x - b).max())
        if residual > RESIDUAL_TOL * scale:
            raise SolverDidNotConverge(
                f"ball solve residual {residual:.3e} > {RESIDUAL_TOL * scale:.3e}")
        return x

    def point_source(self, z: Site) -> np.ndarray:
        """Column g(x) = G_n(x, z) for all x in the ball (one solve)."""
        b = np.zeros(self.N)
        b[self.site_id(z)] = 1.0
        return self.solve(b)

    def occupation_time(self, member_mask: np.ndarray) -> np.ndarray:
        """v(x) = E_x[time spent in the masked subset before exiting]
        = sum over masked y of G_n(x, y)."""
        return self.solve(member_mask.astype(float))

    def expected_exit_times(self) -> np.ndarray:
        """E_x[H(ball^c)] for all x (equals the row sums of G_n)."""
        return self.solve(np.ones(self.N))

    def harmonic_extension(self, f) -> np.ndarray:
        """u(x) = E_x[f(S(H))] with f evaluated at the exit site."""
        b = np.zeros(self.N)
        inv2d = 1.0 / (2 * self.d)
        out_idx, out_sites = self._exterior_contacts()
        for i, s in zip(out_idx, out_sites):
            b[i] += inv2d * f(tuple(s))
        return self.solve(b)

    def _exterior_contacts(self):
        """Pairs (inside index, outside neighbor site), one per contact edge."""
        idx_list, site_list = [], []
        off = self.n
        shape = self.index.shape
        for axis in range(self.d):
            for s in (1, -1):
                nb = np.roll(self.index, -s, axis=axis)
                # wrapped entries along this axis land outside the ball anyway,
                # but mask them to be safe
                edge = np.ones(shape, dtype=bool)
                sl = [slice(None)] * self.d
                sl[axis] = -1 if s == 1 else 0
                edge[tuple(sl)] = False
                m = (self.index >= 0) & (nb < 0) & edge
                inside = self.index[m]
                coords = np.argwhere(m) - off
                coords[:, axis] += s
                idx_list.append(inside)
                site_list.append(coords)
        return np.concatenate(idx_list), np.concatenate(site_list)


@lru_cache(maxsize=8)
def _cached_ball_system(n: int, d: int) -> BallSystem:
    return BallSystem(n, d)


# ---------------------------------------------------------------------------
# whole-space kernel estimates and the K_g band
# ---------------------------------------------------------------------------


def whole_space_kernel_table(m: int, d: int) -> dict[Site, float]:
    """Estimate of the whole-space kernel at every z in B(0, m):

    d >= 3: G(0, z) = G_m(0, z) + E_z[G(0, S(H_m))], closing with the
    asymptotic kernel at the exit site.
    d == 2: a(0, z) = E_z[a(0, S(H_m))] - G_m(0, z), same closure.
    """
    sysm = _cached_ball_system(m, d)
    g0 = sysm.point_source((0,) * d)
    u = sysm.harmonic_extension(lambda s: green_asymptotic(s, d))
    vals = u - g0 if d == 2 else u + g0
    if d == 2:
        # the origin itself: a(0,0) = 0 by definition
        vals = vals.copy()
    return {tuple(s): float(v) for s, v in zip(sysm.sites.tolist(), vals)}


@dataclass
class KernelFit:
    d: int
    kg: float
    calibration_radii: tuple
    holdout_radii: tuple
    holdout_kg: float
    flagged: bool  # holdout needed more than twice the calibrated constant


def fit_asymptotic_band(d: int, calibration_radii=(3, 4, 5, 6, 7),
                        holdout_radii=(8, 9, 10), m: int = 15) -> KernelFit:
    """Fit the constant K in |exact - asymptotic| <= K / ||z||^p on
    calibration radii (p = d for d >= 3, p = 2 for d = 2) and report the
    constant the holdout radii would need."""
    table = whole_space_kernel_table(m, d)
    p = d if d >= 3 else 2

    def needed(radii):
        worst = 0.0
        for z, exact in table.items():
            n2 = norm2(z)
            if n2 == 0:
                continue
            r = math.sqrt(n2)
            lo, hi = min(radii), max(radii)
            if not (lo <= r <= hi):
                continue
            err = abs(exact - green_asymptotic(z, d))
            worst = max(worst, err * r ** p)
        return worst

    kg = needed(calibration_radii)
    kg_hold = needed(holdout_radii)
    return KernelFit(d, kg, tuple(calibration_radii), tuple(holdout_radii),
                     kg_hold, flagged=kg_hold > 2 * kg)


# ---------------------------------------------------------------------------
# hitting bounds (exit-law constants)
# ---------------------------------------------------------------------------


@dataclass
class HittingBounds:
    n: int
    d: int
    c1: float  # min over boundary of P_0(exit at z*) * n^(d-1)
    c2: float  # max of the same
    kappa_g: float  # max over (z, z*) of P_z(exit at z*) * ||z - z*||^(d-1)


def check_hitting_bounds(n: int, d: int,
                         max_sites: int = MAX_DENSE_SITES) -> HittingBounds:
    """Exact exit-law constants for B(0, n) from the dense table."""
    from .lattice import enumerate_ball

    table = solve_green(enumerate_ball((0,) * d, n), max_sites=max_sites)
    bnd, M = table.exit_law_matrix()
    origin = table.index[(0,) * d]
    p0 = M[origin]
    scale = float(n) ** (d - 1)
    c1 = float(p0.min() * scale)
    c2 = float(p0.max() * scale)
    sites = np.array(table.sites, dtype=np.int64)
    bnd_arr = np.array(bnd, dtype=np.int64)
    diff = sites[:, None, :] - bnd_arr[None, :, :]
    dist = np.sqrt((diff.astype(float) ** 2).sum(axis=2))
    kappa = float((M * dist ** (d - 1)).max())
    if c1 <= 0:
        raise AssertionError("exit law lower constant must be positive")
    return HittingBounds(n, d, c1, c2, kappa)


# ---------------------------------------------------------------------------
# annulus occupation expansion and the mean value surrogate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnnulusSpec:
    """Outer radius n and annulus width delta, with r_n = n - delta.

    The width window is K0 <= delta <= ceil(n^(1/3)); the ceiling admits
    the integer width that the scaling prescription delta = ceil(n^(1/3))
    produces.
    """

    n: int
    delta: int
    K0: int = 2

    def __post_init__(self):
        if self.delta < self.K0:
            raise ValueError(f"delta={self.delta} below K0={self.K0}")
        if self.delta > math.ceil(self.n ** (1 / 3)):
            raise ValueError(f"delta={self.delta} above ceil(n^(1/3))")
        if self.n - self.delta <= 0:
            raise ValueError("inner radius must be positive")

    @property
    def r_n(self) -> int:
        return self.n - self.delta


@dataclass
class AnnulusGap:
    z: Site
    lhs: float  # sum over annulus y of G_n(z, y)
    rhs: float  # 2 d delta alpha0(z) - d (n - ||z||)^2
    gap: float
    slack: float  # (n - ||z||) v 1, the allowed growth factor


def _annulus_conditional_alpha0(spec: AnnulusSpec, d: int,
                                sysn: BallSystem) -> tuple[np.ndarray, np.ndarray]:
    """alpha0(z) = E_z[||S(H_n)|| - ||z|| | exit before entering B(0, r_n)]
    for every annulus site, by two killed-walk solves on the annulus."""
    n, rn = spec.n, spec.r_n
    ann_mask = (sysn.norms2 >= rn * rn)
    ann_ids = np.nonzero(ann_mask)[0]
    remap = -np.ones(sysn.N, dtype=np.int64)
    remap[ann_ids] = np.arange(len(ann_ids))
    sites = sysn.sites[ann_ids]
    m = len(ann_ids)
    rows, cols = [], []
    b_u = np.zeros(m)
    b_m = np.zeros(m)
    inv2d = 1.0 / (2 * d)
    for k, z in enumerate(sites.tolist()):
        for nb in neighbors(tuple(z)):
            nn2 = norm2(nb)
            if nn2 >= n * n:
                b_u[k] += inv2d
                b_m[k] += inv2d * math.sqrt(nn2)
            elif nn2 >= rn * rn:
                j = remap[sysn.site_id(nb)]
                rows.append(k)
                cols.append(j)
            # else: absorbed in B(0, r_n), contributes nothing
    P = sp.csr_matrix((np.full(len(rows), inv2d), (rows, cols)), shape=(m, m))
    A = (sp.eye(m, format="csr") - P).tocsc()
    lu = spla.splu(A)
    u = lu.solve(b_u)
    w = lu.solve(b_m)
    for name, x, b in (("exit-prob", u, b_u), ("exit-norm", w, b_m)):
        res = float(np.abs(A @ x - b).max())
        if res > RESIDUAL_TOL * max(1.0, float(np.abs(b).max())):
            raise SolverDidNotConverge(f"annulus {name} residual {res:.3e}")
    alpha0 = w / u - np.sqrt(sysn.norms2[ann_ids].astype(float))
    return ann_ids, alpha0


def annulus_time_profile(spec: AnnulusSpec, d: int) -> list[AnnulusGap]:
    """The occupation-time expansion gap at every annulus site (exact)."""
    sysn = _cached_ball_system(spec.n, d)
    n, rn = spec.n, spec.r_n
    ann_mask = sysn.norms2 >= rn * rn
    v = sysn.occupation_time(ann_mask)
    ann_ids, alpha0 = _annulus_conditional_alpha0(spec, d, sysn)
    out = []
    norms = np.sqrt(sysn.norms2.astype(float))
    for k, i in enumerate(ann_ids.tolist()):
        z = tuple(sysn.sites[i].tolist())
        lhs = float(v[i])
        rhs = 2 * d * spec.delta * float(alpha0[k]) - d * (n - norms[i]) ** 2
        slack = max(n - norms[i], 1.0)
        out.append(AnnulusGap(z, lhs, rhs, abs(lhs - rhs), slack))
    return out


def annulus_time_expansion(spec: AnnulusSpec, z: Site,
                           d: int | None = None) -> AnnulusGap:
    z = tuple(z)
    d = len(z) if d is None else d
    n2 = norm2(z)
    if not spec.r_n ** 2 <= n2 < spec.n ** 2:
        raise ValueError(f"{z} outside the annulus A({spec.r_n}, {spec.n})")
    for g in annulus_time_profile(spec, d):
        if g.z == z:
            return g
    raise RuntimeError("unreachable")


def mean_value_profile(n: int, delta: int, d: int) -> list[tuple[Site, float]]:
    """| |B_{r_n}| G_n(0, z) - sum_{y in B_{r_n}} G_n(y, z) | for every
    outer-rim z (n - ||z|| <= 1), from two solves."""
    spec = AnnulusSpec(n, delta)
    sysn = _cached_ball_system(n, d)
    rn = spec.r_n
    inner_mask = sysn.norms2 < rn * rn
    ball_count = int(inner_mask.sum())
    g0 = sysn.point_source((0,) * d)
    w = sysn.occupation_time(inner_mask)
    norms = np.sqrt(sysn.norms2.astype(float))
    rim = np.nonzero(n - norms <= 1.0)[0]
    return [(tuple(sysn.sites[i].tolist()),
             float(abs(ball_count * g0[i] - w[i]))) for i in rim.tolist()]


def mean_value_discrepancy(n: int, delta: int, z: Site) -> float:
    z = tuple(z)
    d = len(z)
    if n - math.sqrt(norm2(z)) > 1.0 or norm2(z) >= n * n:
        raise ValueError("z must lie on the outer rim (n - ||z|| <= 1)")
    AnnulusSpec(n, delta)  # validates the width window
    for site, disc in mean_value_profile(n, delta, d):
        if site == z:
            return disc
    raise RuntimeError("unreachable")


def exit_law_mean_value_discrepancy(n: int, delta: int, d: int,
                                    boundary_targets: list[Site]) -> dict[Site, float]:
    """Corollary form of the mean value check, per boundary site z*:
    | |B_{r_n}| P_0(exit at z*) - sum_{y in B_{r_n}} P_y(exit at z*) |."""
    spec = AnnulusSpec(n, delta)
    sysn = _cached_ball_system(n, d)
    rn = spec.r_n
    inner_mask = sysn.norms2 < rn * rn
    ball_count = int(inner_mask.sum())
    origin = sysn.site_id((0,) * d)
    inv2d = 1.0 / (2 * d)
    out = {}
    for zstar in boundary_targets:
        q = np.zeros(sysn.N)
        for nb in neighbors(tuple(zstar)):
            if norm2(nb) < n * n:
                q += sysn.point_source(nb)
        q *= inv2d
        out[tuple(zstar)] = float(abs(ball_count * q[origin] - q[inner_mask].sum()))
    return out
