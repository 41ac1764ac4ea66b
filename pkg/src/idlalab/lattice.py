"""Z^d geometry: points, exact norms, balls, annuli, boundaries.

Sites are plain tuples of ints.  All membership tests run in exact
arithmetic: integer squared norms compared against an exact square of the
radius (``Fraction`` when the radius is rational, float otherwise -- exact
for half-integer radii, which is all the package uses).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator

import numpy as np

Site = tuple[int, ...]


def norm2(z: Site) -> int:
    """Exact integer squared Euclidean norm."""
    return sum(c * c for c in z)


def dist2(a: Site, b: Site) -> int:
    return sum((x - y) * (x - y) for x, y in zip(a, b))


def neighbor_offsets(d: int) -> list[Site]:
    """The fixed neighbor order (+e1, -e1, ..., +e_d, -e_d)."""
    offs = []
    for axis in range(d):
        for sign in (1, -1):
            v = [0] * d
            v[axis] = sign
            offs.append(tuple(v))
    return offs


def neighbors(z: Site) -> list[Site]:
    d = len(z)
    out = []
    for axis in range(d):
        for sign in (1, -1):
            v = list(z)
            v[axis] += sign
            out.append(tuple(v))
    return out


def radius_sq(radius) -> Fraction | float:
    """Exact square of a radius: Fraction for int/Fraction input, float else."""
    if isinstance(radius, (int, Fraction)):
        return Fraction(radius) * Fraction(radius)
    return float(radius) * float(radius)


class Region:
    """Finite set of lattice sites: O(1) membership, cached cardinality,
    lexicographic iteration order."""

    __slots__ = ("_set", "_sorted", "d")

    def __init__(self, sites: Iterable[Site], d: int | None = None):
        self._set = frozenset(tuple(s) for s in sites)
        self._sorted: list[Site] | None = None
        if self._set:
            dims = {len(s) for s in self._set}
            if len(dims) != 1:
                raise ValueError("sites of mixed dimension")
            dim = dims.pop()
            if d is not None and d != dim:
                raise ValueError(f"dimension mismatch: sites are {dim}-d, "
                                 f"context is {d}-d")
            self.d = dim
        else:
            if d is None:
                raise ValueError("empty region needs an explicit dimension")
            self.d = d

    def __contains__(self, z: Site) -> bool:
        return tuple(z) in self._set

    def __len__(self) -> int:
        return len(self._set)

    def __iter__(self) -> Iterator[Site]:
        if self._sorted is None:
            self._sorted = sorted(self._set)
        return iter(self._sorted)

    def __eq__(self, other) -> bool:
        return isinstance(other, Region) and self._set == other._set

    def __hash__(self) -> int:
        return hash(self._set)

    def as_set(self) -> frozenset:
        return self._set

    def sites_array(self) -> np.ndarray:
        """(|region|, d) int64 array in lexicographic order."""
        return np.array(list(self), dtype=np.int64).reshape(len(self), self.d)

    def boundary(self) -> "Region":
        """Outer lattice boundary: sites off the region adjacent to it."""
        out = set()
        for z in self._set:
            for nb in neighbors(z):
                if nb not in self._set:
                    out.add(nb)
        return Region(out, d=self.d)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Region(<{len(self)} sites, d={self.d}>)"


@dataclass(frozen=True)
class Ball:
    """Open Euclidean ball; lattice membership is strict (< radius)."""

    center: Site
    radius: float | int | Fraction

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be non-negative")

    def contains(self, z: Site) -> bool:
        if len(z) != len(self.center):
            raise ValueError("dimension mismatch")
        return dist2(z, self.center) < radius_sq(self.radius)


@dataclass(frozen=True)
class Annulus:
    """Sites y with inner <= ||y|| < outer (centered at the origin)."""

    inner: float | int | Fraction
    outer: float | int | Fraction

    def __post_init__(self):
        if not 0 <= self.inner <= self.outer:
            raise ValueError("need 0 <= inner <= outer")

    def contains(self, z: Site) -> bool:
        n2 = norm2(z)
        return radius_sq(self.inner) <= n2 < radius_sq(self.outer)


def enumerate_ball(center: Site, radius, d: int | None = None) -> Region:
    """All lattice sites with ||y - center|| < radius, lexicographic order."""
    center = tuple(center)
    if d is not None and d != len(center):
        raise ValueError(f"center is {len(center)}-d but context is {d}-d")
    d = len(center)
    if d < 2:
        raise ValueError("dimension must be >= 2")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    r2 = radius_sq(radius)
    reach = math.isqrt(math.ceil(float(radius) ** 2))  # box half-width
    if d <= 3:
        axes = [np.arange(c - reach, c + reach + 1, dtype=np.int64)
                for c in center]
        grids = np.meshgrid(*axes, indexing="ij")
        n2 = sum((g - c) ** 2 for g, c in zip(grids, center))
        if isinstance(r2, Fraction):
            mask = n2 * r2.denominator < r2.numerator
        else:
            mask = n2 < r2
        coords = np.stack([g[mask] for g in grids], axis=-1)
        return Region(map(tuple, coords.tolist()), d=d)
    sites = []
    for off in itertools.product(range(-reach, reach + 1), repeat=d):
        if sum(c * c for c in off) < r2:
            sites.append(tuple(o + c for o, c in zip(off, center)))
    return Region(sites, d=d)


def boundary(region: Region) -> Region:
    return region.boundary()


def sphere_sites(r: int, d: int) -> list[Site]:
    """The outer boundary of the lattice ball B(0, r): sites with norm >= r
    adjacent to a site with norm < r.  Sorted lexicographically."""
    if r <= 0:
        return [(0,) * d] if r == 0 else []
    out = []
    r2 = r * r
    # candidates live in the annulus r <= ||z|| < r + 1
    lo2, hi2 = r2, (r + 1) * (r + 1)
    reach = r + 1
    for off in _annulus_iter(reach, lo2, hi2, d):
        if any(norm2(nb) < r2 for nb in neighbors(off)):
            out.append(off)
    out.sort()
    return out


def _annulus_iter(reach: int, lo2: int, hi2: int, d: int):
    for off in itertools.product(range(-reach, reach + 1), repeat=d):
        n2 = norm2(off)
        if lo2 <= n2 < hi2:
            yield off


def norm_decreasing_neighbor(z: Site) -> Site:
    """The neighbor of z obtained by decrementing a coordinate of maximal
    absolute value toward 0 (ties: lowest index); its norm drops by at
    least 1/(2*sqrt(d))."""
    if all(c == 0 for c in z):
        raise ValueError("the origin has no norm-decreasing neighbor")
    b = max(abs(c) for c in z)
    i = next(i for i, c in enumerate(z) if abs(c) == b)
    v = list(z)
    v[i] -= 1 if v[i] > 0 else -1
    return tuple(v)
