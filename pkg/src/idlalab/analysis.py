"""Statistical verifiers: the Bernoulli MGF-ratio inequality, the
coupon-collector tail bound, fluctuation scaling experiments, and the
uniform-hitting audit.

Every statistical assertion carries its sample size and a confidence
interval; the MGF check is deterministic (extended precision) and a
violation there is a hard failure.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import mpmath as mp
import numpy as np
from numba import njit
from scipy import stats

from ._rng import LANE_MISC, RandomStream, _stream_block, derive_seed
from .flashing import (ShellPartition, TileSet, experiment_partition,
                       grow_flashing, measure_flash_errors,
                       sigma_stop_samples)
from .idla import ball_site_count, grow_idla, measure_errors
from .lattice import Site, norm2

# ---------------------------------------------------------------------------
# Bernoulli MGF ratio inequality (deterministic, extended precision)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BernoulliPair:
    """Success probabilities of two independent Bernoulli sums S and S',
    a tilt t, and (for t <= 0) the kappa bounding sup E[Y_i]."""

    p: tuple
    q: tuple
    t: float
    kappa: float | None = None

    def __post_init__(self):
        for v in (*self.p, *self.q):
            if not 0.0 <= v <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")


@dataclass
class MgfCheckResult:
    ok: bool
    skipped: bool
    margin: float  # log RHS - log LHS (>= 0 when the inequality holds)
    reason: str = ""


def verify_mgf_lemma(pair: BernoulliPair, dps: int = 60) -> MgfCheckResult:
    """Exact check of the centered-MGF ratio bound:

    t in [0, log 2]:
      E e^{t(S - ES)} / E e^{t(S' - ES')}
        <= exp(f(t) E[S - S'] + g(t) sum q_i^2)
    t <= 0 with sup q_i <= (kappa-1)/kappa:
      same with (kappa/2) g(t) sum q_i^2,
    where f(t) = e^t - 1 - t and g(t) = (e^t - 1)^2.

    Precondition violations are reported as skips, never failures.
    """
    t = pair.t
    if t > 0:
        if t > math.log(2) + 1e-15:
            return MgfCheckResult(False, True, 0.0, "t above log 2")
        kappa_half = None
    elif t == 0:
        kappa_half = None
    else:
        if pair.kappa is None or pair.kappa <= 1:
            return MgfCheckResult(False, True, 0.0, "t < 0 needs kappa > 1")
        cap = (pair.kappa - 1) / pair.kappa
        if any(q > cap + 1e-15 for q in pair.q):
            return MgfCheckResult(False, True, 0.0,
                                  "sup q_i exceeds (kappa-1)/kappa")
        kappa_half = pair.kappa / 2
    with mp.workdps(dps):
        tt = mp.mpf(t)
        et = mp.e ** tt

        def centered_factor(prob):
            p = mp.mpf(prob)
            return mp.e ** (-tt * p) * (1 + p * (et - 1))

        log_lhs = mp.mpf(0)
        for prob in pair.p:
            log_lhs += mp.log(centered_factor(prob))
        for prob in pair.q:
            log_lhs -= mp.log(centered_factor(prob))
        f = et - 1 - tt
        g = (et - 1) ** 2
        mean_gap = mp.fsum(pair.p) - mp.fsum(pair.q)
        sq = mp.fsum(mp.mpf(q) ** 2 for q in pair.q)
        log_rhs = f * mean_gap + (kappa_half if kappa_half else g * 0 + g) * 0
        if kappa_half is None:
            log_rhs = f * mean_gap + g * sq
        else:
            log_rhs = f * mean_gap + kappa_half * g * sq
        margin = float(log_rhs - log_lhs)
    return MgfCheckResult(margin >= -1e-40, False, margin)


def random_mgf_instances(count: int, rng: RandomStream, max_terms: int = 50):
    """Randomized (p, q, t, kappa) instances within the lemma's domain."""
    out = []
    for _ in range(count):
        n = int(rng.uniform() * (max_terms + 1))
        m = int(rng.uniform() * (max_terms + 1))
        neg = rng.uniform() < 0.5
        if neg:
            kappa = 1.0 + 0.2 + 4.0 * rng.uniform()
            cap = (kappa - 1) / kappa
            q = tuple(cap * rng.uniform() for _ in range(m))
            t = -3.0 * rng.uniform()
        else:
            kappa = None
            q = tuple(rng.uniform() for _ in range(m))
            t = math.log(2) * rng.uniform()
        p = tuple(rng.uniform() for _ in range(n))
        out.append(BernoulliPair(p, q, t, kappa))
    return out


# ---------------------------------------------------------------------------
# coupon-collector tail bound
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CouponConfig:
    """Album of L items; item i is drawn with probability probs[i] (the
    remainder is a null coupon).  Each probability sits in
    [alpha1/L, alpha2/L]."""

    L: int
    probs: tuple
    alpha1: float
    alpha2: float
    A: float

    def __post_init__(self):
        if len(self.probs) != self.L:
            raise ValueError("need one probability per item")
        if sum(self.probs) > 1 + 1e-12:
            raise ValueError("item probabilities exceed 1")
        for p in self.probs:
            if not (self.alpha1 / self.L - 1e-12 <= p
                    <= self.alpha2 / self.L + 1e-12):
                raise ValueError("item probability outside [a1/L, a2/L]")
        if self.A <= 0:
            raise ValueError("A must be positive")

    @property
    def lemma_applicable(self) -> bool:
        """The tail bound is stated for 0 < A < log(L) / (4 alpha2)."""
        return self.A < math.log(self.L) / (4 * self.alpha2) \
            if self.L > 1 else False

    @property
    def tail_bound(self) -> float:
        return math.exp(-self.alpha1 ** 2 * self.A ** 2
                        * math.exp(-2 * self.alpha2 * self.A)
                        * math.sqrt(self.L) / 4)


@njit(cache=True)
def _coupon_kernel(cum, trials, threshold, seed, unit_base):
    """Count trials where the album completes in fewer than ``threshold``
    coupons.  cum = cumulative item probabilities (len L); draws above
    cum[-1] are null coupons."""
    L = len(cum)
    hits = 0
    for tr in range(trials):
        unit = unit_base + tr
        got = np.zeros(L, dtype=np.uint8)
        need = L
        n = 0
        word = 0
        while need > 0:
            blk = word >> 2
            w0, w1, w2, w3 = _stream_block(seed, unit, LANE_MISC, blk)
            k = word & 3
            if k == 0:
                hi = w0
            elif k == 1:
                hi = w1
            elif k == 2:
                hi = w2
            else:
                hi = w3
            word += 1
            blk = word >> 2
            w0, w1, w2, w3 = _stream_block(seed, unit, LANE_MISC, blk)
            k = word & 3
            if k == 0:
                lo = w0
            elif k == 1:
                lo = w1
            elif k == 2:
                lo = w2
            else:
                lo = w3
            word += 1
            u = float((np.uint64(hi) << np.uint64(32) | np.uint64(lo))
                      >> np.uint64(11)) / 9007199254740992.0
            n += 1
            if n >= threshold + 1_000_000:
                break  # runaway guard; counts as "not completed early"
            item = np.searchsorted(cum, u, side="right")
            if item < L and got[item] == 0:
                got[item] = 1
                need -= 1
        if n < threshold:
            hits += 1
    return hits


@dataclass
class CouponResult:
    config: CouponConfig
    trials: int
    completions_early: int
    empirical: float
    wilson_lower: float  # 99.9% lower confidence bound on the tail prob
    bound: float

    @property
    def ok(self) -> bool:
        """No statistically significant violation of the tail bound."""
        return self.wilson_lower <= self.bound + 1e-12


def wilson_interval(k: int, n: int, conf: float = 0.999):
    """Wilson score interval for a binomial proportion."""
    if n == 0:
        return 0.0, 1.0
    z = stats.norm.ppf(0.5 + conf / 2)
    phat = k / n
    denom = 1 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def simulate_coupon(config: CouponConfig, trials: int,
                    rng: RandomStream) -> CouponResult:
    """Empirical P(tau_L < A L) with a Wilson interval, checked against the
    exp(-a1^2 A^2 e^(-2 a2 A) sqrt(L)/4) tail bound."""
    cum = np.cumsum(np.asarray(config.probs, dtype=np.float64))
    threshold = config.A * config.L
    hits = int(_coupon_kernel(cum, trials, threshold, rng.seed, rng.unit))
    emp = hits / trials
    lo, _ = wilson_interval(hits, trials)
    return CouponResult(config, trials, hits, emp, lo, config.tail_bound)


# ---------------------------------------------------------------------------
# scaling experiments
# ---------------------------------------------------------------------------


@dataclass
class RadiusSummary:
    n: float
    N: int
    count: int
    mean_inner: float
    sd_inner: float
    mean_outer: float
    sd_outer: float
    inner: list = field(default_factory=list)
    outer: list = field(default_factory=list)
    seeds: list = field(default_factory=list)


@dataclass
class ScalingReport:
    model: str  # "idla" | "flashing"
    d: int
    h0: int | None
    radii: list
    per_radius: list  # RadiusSummary, ordered as radii
    exponent_inner: float | None
    ci_inner: tuple | None
    exponent_outer: float | None
    ci_outer: tuple | None
    seeds_per_radius: int
    master_seed: int
    ci_method: str = "ols-log-mean, bootstrap over seeds (1000 resamples)"
    # flashing only: fitted bracket constants for h log h <= delta_I <= h log n
    bracket_lower: float | None = None
    bracket_upper: float | None = None


def _scaling_cell(args):
    model, n, h0, d, cell_seed, step_cap = args
    N = ball_site_count(n, d)
    rng = RandomStream(cell_seed)
    if model == "idla":
        cluster = grow_idla(N, rng, d=d, step_cap=step_cap)
        rec = measure_errors(cluster, n)
    else:
        shells = experiment_partition(n, h0, d)
        cluster = grow_flashing(N, shells, rng, step_cap=step_cap)
        rec = measure_flash_errors(cluster, n)
    return n, cell_seed, rec.delta_inner, rec.delta_outer


def ols_slope(xs: np.ndarray, ys: np.ndarray):
    """(slope, stderr) of ordinary least squares y = a + b x."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    xm, ym = xs.mean(), ys.mean()
    sxx = ((xs - xm) ** 2).sum()
    slope = ((xs - xm) * (ys - ym)).sum() / sxx
    if len(xs) > 2:
        resid = ys - (ym + slope * (xs - xm))
        se = math.sqrt((resid ** 2).sum() / (len(xs) - 2) / sxx)
    else:
        se = float("nan")
    return float(slope), float(se)


def _bootstrap_exponent(radii, samples_by_radius, master_seed, resamples=1000):
    """Bootstrap CI of the log-log slope, resampling seeds within radii."""
    gen = np.random.Generator(np.random.Philox(key=master_seed & (2**63 - 1)))
    logn = np.log(np.asarray(radii, dtype=float))
    slopes = np.empty(resamples)
    arrays = [np.asarray(s, dtype=float) for s in samples_by_radius]
    for b in range(resamples):
        means = []
        for arr in arrays:
            idx = gen.integers(0, len(arr), len(arr))
            means.append(max(arr[idx].mean(), 1e-9))
        slopes[b], _ = ols_slope(logn, np.log(means))
    return float(np.quantile(slopes, 0.025)), float(np.quantile(slopes, 0.975))


def run_scaling_experiment(model: str, radii, seeds_per_radius: int,
                           master_seed: int, d: int = 2, h0: int = 16,
                           workers: int | None = None, min_seeds: int = 30,
                           step_cap: int = 10 ** 10) -> ScalingReport:
    """Grow clusters over (radius, seed) cells, measure errors, and fit the
    log-log regression exponent of the mean errors with a bootstrap CI.

    Cells run in a process pool (IDLA_THREADS overrides the size); output
    ordering is deterministic by (radius, seed index).
    """
    if list(radii) != sorted(radii):
        raise ValueError("radii must be increasing")
    if model not in ("idla", "flashing"):
        raise ValueError(f"unknown model {model!r}")
    if seeds_per_radius < min_seeds:
        raise ValueError(f"need at least {min_seeds} seeds per radius "
                         f"(got {seeds_per_radius}); lower min_seeds "
                         f"explicitly for smoke runs")
    jobs = []
    for n in radii:
        for s in range(seeds_per_radius):
            cell_seed = derive_seed(master_seed, int(round(n * 8)), s)
            jobs.append((model, n, h0, d, cell_seed, step_cap))
    if workers is None:
        workers = int(os.environ.get("IDLA_THREADS", os.cpu_count() or 1))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_scaling_cell, jobs, chunksize=4))
    else:
        results = [_scaling_cell(j) for j in jobs]
    by_radius = {n: RadiusSummary(n, ball_site_count(n, d), 0, 0, 0, 0, 0)
                 for n in radii}
    for n, cell_seed, di, do in results:
        s = by_radius[n]
        s.inner.append(di)
        s.outer.append(do)
        s.seeds.append(cell_seed)
    for s in by_radius.values():
        s.count = len(s.inner)
        s.mean_inner = float(np.mean(s.inner))
        s.sd_inner = float(np.std(s.inner))
        s.mean_outer = float(np.mean(s.outer))
        s.sd_outer = float(np.std(s.outer))
    per_radius = [by_radius[n] for n in radii]
    exp_i = ci_i = exp_o = ci_o = None
    if len(radii) >= 2:
        logn = np.log(np.asarray(radii, dtype=float))
        mi = np.log([max(s.mean_inner, 1e-9) for s in per_radius])
        mo = np.log([max(s.mean_outer, 1e-9) for s in per_radius])
        exp_i, _ = ols_slope(logn, mi)
        exp_o, _ = ols_slope(logn, mo)
        ci_i = _bootstrap_exponent(radii, [s.inner for s in per_radius],
                                   derive_seed(master_seed, 0xB007, 1))
        ci_o = _bootstrap_exponent(radii, [s.outer for s in per_radius],
                                   derive_seed(master_seed, 0xB007, 2))
    lower = upper = None
    if model == "flashing":
        lhh = h0 * math.log(h0)
        lower = min(s.mean_inner for s in per_radius) / lhh
        upper = max(s.mean_inner / (h0 * math.log(s.n)) for s in per_radius)
    return ScalingReport(model, d, h0 if model == "flashing" else None,
                         list(radii), per_radius, exp_i, ci_i, exp_o, ci_o,
                         seeds_per_radius, master_seed,
                         bracket_lower=lower, bracket_upper=upper)


# ---------------------------------------------------------------------------
# uniform hitting audit
# ---------------------------------------------------------------------------


@dataclass
class AnchorAudit:
    anchor: Site
    cell_size: int
    min_norm_prob: float  # min over cell sites of empirical prob * h^d
    max_norm_prob: float
    anchor_norm_prob: float  # the X-branch site itself
    flash_rate: float


@dataclass
class UniformHittingReport:
    j: int
    h: int
    d: int
    samples_per_anchor: int
    anchors: list
    per_anchor: list
    band_min: float
    band_max: float
    ratio: float
    ratio_ceiling: float
    floor_ok: bool  # anchor prob respects the 1/h^d X-branch floor
    asserted: bool  # enough samples to assert the band at all

    @property
    def ok(self) -> bool:
        return (self.asserted and self.band_min > 0
                and self.ratio <= self.ratio_ceiling and self.floor_ok)


def pick_anchors(shells: ShellPartition, j: int, count: int) -> list[Site]:
    """Deterministic, roughly evenly spaced anchors on Sigma_j."""
    sigma = shells.sigma_sites(j)
    if count >= len(sigma):
        return list(sigma)
    step = len(sigma) / count
    return [sigma[int(i * step)] for i in range(count)]


def uniform_hitting_audit(shells: ShellPartition, j: int, anchors,
                          samples_per_anchor: int, rng: RandomStream,
                          ratio_ceiling: float = 25.0) -> UniformHittingReport:
    """Empirical flashing-landing probabilities over each anchor's cell,
    normalized by h^d; asserts a common positive band with bounded
    max/min ratio, provided expected per-site counts reach 20."""
    d = shells.d
    h = int(shells.h[j])
    hd = float(h) ** d
    per_anchor = []
    gmin, gmax = float("inf"), 0.0
    floor_ok = True
    expected_per_site = samples_per_anchor / hd
    asserted = expected_per_site >= 20
    for a_idx, anchor in enumerate(anchors):
        cell = shells.cell_sites(tuple(anchor), j)
        sub = rng.child(unit=rng.unit + a_idx * samples_per_anchor)
        sites, flags = sigma_stop_samples(shells, tuple(anchor), j,
                                          samples_per_anchor, sub)
        counts: dict[Site, int] = {}
        for row, f in zip(sites.tolist(), flags.tolist()):
            if f:
                key = tuple(row)
                counts[key] = counts.get(key, 0) + 1
        norm = {z: counts.get(z, 0) / samples_per_anchor * hd for z in cell}
        vals = np.array(list(norm.values()))
        anchor_prob = norm[tuple(anchor)]
        # X-branch floor: P(stop at the entry point) >= 1/h^d exactly; allow
        # five binomial standard deviations of sampling slack
        slack = 5 * math.sqrt(hd / samples_per_anchor)
        if anchor_prob < 1 - slack:
            floor_ok = False
        per_anchor.append(AnchorAudit(tuple(anchor), len(cell),
                                      float(vals.min()), float(vals.max()),
                                      anchor_prob, float(flags.mean())))
        gmin = min(gmin, float(vals.min()))
        gmax = max(gmax, float(vals.max()))
    ratio = gmax / gmin if gmin > 0 else float("inf")
    return UniformHittingReport(j, h, d, samples_per_anchor,
                                [tuple(a) for a in anchors], per_anchor,
                                gmin, gmax, ratio, ratio_ceiling, floor_ok,
                                asserted)


# ---------------------------------------------------------------------------
# wave crossing statistics and the cell-covering experiment
# ---------------------------------------------------------------------------


def wave_crossing_statistics(shells: ShellPartition, wave_positions,
                             settled_sites: np.ndarray, k: int,
                             tileset: TileSet, rng: RandomStream):
    """Measured W_k, M_k, L_k per tile for one wave.

    W_k counts the unsettled explorers standing on each tile; M_k adds, for
    each settled site, one fresh walk run to its exit of B(0, r_k); L_k
    sends one walk from every site of B(0, r_k - h_k).  Returns a dict
    tile index -> (W, M, L).
    """
    from .lattice import enumerate_ball
    from .walk import exit_samples_from_each

    d = shells.d
    rk = int(shells.r[k])
    hk = int(shells.h[k])
    site_to_tiles = tileset.tile_of_sites()
    W = np.zeros(len(tileset.tiles))
    for row in wave_positions.tolist():
        for ti in site_to_tiles.get(tuple(row), ()):
            W[ti] += 1
    ball = enumerate_ball((0,) * d, rk)
    M = W.copy()
    inner = settled_sites[(settled_sites.astype(np.int64) ** 2).sum(axis=1)
                          < rk * rk]
    if len(inner):
        sites, _ = exit_samples_from_each(ball, inner, rng)
        for row in sites.tolist():
            for ti in site_to_tiles.get(tuple(row), ()):
                M[ti] += 1
    L = np.zeros(len(tileset.tiles))
    src = enumerate_ball((0,) * d, rk - hk).sites_array()
    if len(src):
        sites, _ = exit_samples_from_each(
            ball, src, rng.child(unit=rng.unit + len(inner) + 1))
        for row in sites.tolist():
            for ti in site_to_tiles.get(tuple(row), ()):
                L[ti] += 1
    return {i: (float(W[i]), float(M[i]), float(L[i]))
            for i in range(len(tileset.tiles))}


def cell_covering_experiment(shells: ShellPartition, tileset: TileSet,
                             tile_index: int, a_values, log_n: float,
                             trials: int, rng: RandomStream):
    """Coupon-collector covering check: place xi = A h^d log(n) explorers
    round-robin on a tile, give each one flashing attempt, and estimate
    the probability that the commonly-coverable region keeps a hole.
    Returns {A: hole probability}; expected to decay as A grows."""
    d = shells.d
    j = tileset.j
    h = int(shells.h[j])
    tile = tileset.tiles[tile_index]
    common = [z for z in shells.cell_sites(tile.anchor, j)
              if all(shells.cell_contains(y, j, z) for y in tile.sites)]
    if not common:
        raise ValueError("tile has an empty commonly-coverable region")
    common_set = set(common)
    a_values = sorted(a_values)
    xi_max = int(math.ceil(max(a_values) * h ** d * log_n))
    per_site = int(math.ceil(xi_max / len(tile.sites))) * trials
    stops = {}
    for idx, y in enumerate(tile.sites):
        sub = rng.child(unit=rng.unit + idx * per_site)
        sites, flags = sigma_stop_samples(shells, y, j, per_site, sub)
        stops[y] = (sites, flags)
    out = {}
    for A in a_values:
        xi = int(math.ceil(A * h ** d * log_n))
        holes = 0
        for tr in range(trials):
            covered = set()
            for e in range(xi):
                y = tile.sites[e % len(tile.sites)]
                k = tr * (xi_max // len(tile.sites) + 1) + e // len(tile.sites)
                sites, flags = stops[y]
                if flags[k]:
                    covered.add(tuple(sites[k].tolist()))
            if not common_set.issubset(covered):
                holes += 1
        out[A] = holes / trials
    return out


# ---------------------------------------------------------------------------
# generic test statistics
# ---------------------------------------------------------------------------


def chi2_gof_pvalue(counts: np.ndarray, probs: np.ndarray) -> float:
    """Goodness-of-fit p-value of observed counts against exact cell
    probabilities (cells pooled to expected count >= 5)."""
    counts = np.asarray(counts, dtype=float)
    probs = np.asarray(probs, dtype=float)
    n = counts.sum()
    order = np.argsort(probs)
    pooled_c, pooled_p = [], []
    acc_c = acc_p = 0.0
    for i in order:
        acc_c += counts[i]
        acc_p += probs[i]
        if acc_p * n >= 5:
            pooled_c.append(acc_c)
            pooled_p.append(acc_p)
            acc_c = acc_p = 0.0
    if acc_p > 0 and pooled_p:
        pooled_c[-1] += acc_c
        pooled_p[-1] += acc_p
    pooled_p = np.asarray(pooled_p) / sum(pooled_p)
    res = stats.chisquare(pooled_c, n * pooled_p)
    return float(res.pvalue)


def two_sample_counts_pvalue(counts_a: dict, counts_b: dict,
                             min_expected: float = 5.0) -> float:
    """Homogeneity chi^2 between two count tables over arbitrary keys
    (rare cells pooled)."""
    keys = sorted(set(counts_a) | set(counts_b))
    a = np.array([counts_a.get(k, 0) for k in keys], dtype=float)
    b = np.array([counts_b.get(k, 0) for k in keys], dtype=float)
    na, nb = a.sum(), b.sum()
    tot = a + b
    order = np.argsort(tot)
    pooled = []
    acc_a = acc_b = 0.0
    for i in order:
        acc_a += a[i]
        acc_b += b[i]
        exp_a = (acc_a + acc_b) * na / (na + nb)
        exp_b = (acc_a + acc_b) * nb / (na + nb)
        if exp_a >= min_expected and exp_b >= min_expected:
            pooled.append((acc_a, acc_b))
            acc_a = acc_b = 0.0
    if (acc_a or acc_b) and pooled:
        pooled[-1] = (pooled[-1][0] + acc_a, pooled[-1][1] + acc_b)
    arr = np.asarray(pooled)
    res = stats.chi2_contingency(arr.T)
    return float(res.pvalue)


def ks_uniform_power_pvalue(values: np.ndarray, d: int) -> float:
    """KS test of R/h against the CDF u^d."""
    return float(stats.kstest(np.asarray(values, dtype=float),
                              lambda u: np.clip(u, 0, 1) ** d).pvalue)
