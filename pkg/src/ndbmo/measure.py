"""Finite weighted point measures with polynomial growth control.

A :class:`PointMeasure` is a finite list of distinct atoms with positive
weights in dimension d in {1, 2, 3}, together with a growth exponent
``n in (0, d]``.  The growth constant ``sup mu(B(x, r)) / r^n`` is estimated
over a geometric radius grid (atoms force a blowup as r -> 0, so the check is
grid-restricted by design and every report says so).  ``normalize_growth``
rescales so that the grid estimate is exactly one.

Mass queries use ``math.fsum`` so that totals are correctly rounded; sums of
nonnegative weights are then monotone under adding atoms, which several
downstream comparisons rely on.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .geometry import Ball, Cube, DyadicCube, Point, _bounds, dilate

__all__ = [
    "PointMeasure",
    "GrowthReport",
    "mass",
    "growth_constant",
    "normalize_growth",
    "is_doubling",
    "make_radius_grid",
    "generate",
    "GENERATOR_KINDS",
    "save_measure",
    "load_measure",
    "load_measure_csv",
]

DEFAULT_GRID_RATIO = 2.0 ** 0.25

# Coordinates produced by generate() sit on the grid (2m+1) / 2^41.  A corner
# of any shifted dyadic cube at generation k has the form (3M + e*sigma) / (3 * 2^k)
# with sigma in {0,1,2}; equality with (2m+1)/2^41 forces either a factor of 3
# on one side only (sigma != 0) or a power of 2 mismatch for k <= 40 (sigma = 0).
# So generated atoms avoid every cube boundary down to generation 40.
_SNAP_BITS = 41


@dataclass(frozen=True, eq=False)
class PointMeasure:
    """Immutable atomic measure: ``weights[i]`` sits at ``points[i]``.

    ``points`` is an (N, dim) float64 array, ``weights`` a positive (N,)
    array; rows are pairwise distinct.  Arrays are frozen after validation.
    """

    dim: int
    growth_exp: float
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2, or 3, got {self.dim}")
        n = float(self.growth_exp)
        if not (0.0 < n <= self.dim):
            raise ValueError(f"growth_exp must lie in (0, {self.dim}], got {n}")
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2 or pts.shape[1] != self.dim:
            raise ValueError(f"points must have shape (N, {self.dim})")
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.shape != (pts.shape[0],):
            raise ValueError("weights must align with points")
        if pts.shape[0] == 0:
            raise ValueError("measure must carry at least one atom")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        if not np.all(np.isfinite(w)) or not np.all(w > 0.0):
            raise ValueError("weights must be finite and positive")
        order = np.lexsort(pts.T)
        sorted_pts = pts[order]
        if pts.shape[0] > 1 and np.any(np.all(sorted_pts[1:] == sorted_pts[:-1], axis=1)):
            raise ValueError("support points must be pairwise distinct")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "growth_exp", n)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.points.shape[0]

    def support_point(self, i: int) -> Point:
        return Point(tuple(float(c) for c in self.points[i]))

    @cached_property
    def total_mass(self) -> float:
        return math.fsum(self.weights)

    @cached_property
    def min_separation(self) -> float:
        """Smallest pairwise distance between atoms (inf for one atom)."""
        return float(_kernels.min_pairwise_distance(self.points))

    @cached_property
    def bounding_box(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        lo = self.points.min(axis=0)
        hi = self.points.max(axis=0)
        return tuple(map(float, lo)), tuple(map(float, hi))

    @cached_property
    def extent(self) -> float:
        """Diagonal of the support bounding box (an upper diameter bound)."""
        lo, hi = self.bounding_box
        return math.hypot(*(b - a for a, b in zip(lo, hi)))

    def scaled(self, factor: float) -> "PointMeasure":
        if not (factor > 0.0 and math.isfinite(factor)):
            raise ValueError("scaling factor must be positive and finite")
        return PointMeasure(self.dim, self.growth_exp, self.points, self.weights * factor)


@dataclass(frozen=True)
class GrowthReport:
    """Outcome of a grid-restricted growth-constant estimate."""

    c_mu_estimate: float
    witness: tuple[Point, float]
    radius_grid: tuple[float, ...]
    note: str


def _in_region_mask(mu: PointMeasure, region) -> np.ndarray:
    pts = mu.points
    if isinstance(region, Ball):
        if region.center.dim != mu.dim:
            raise ValueError("region dimension does not match the measure")
        # accumulate squared offsets axis by axis, matching the kernel order
        acc = np.zeros(len(mu), dtype=np.float64)
        for i, c in enumerate(region.center.coords):
            d = pts[:, i] - c
            acc += d * d
        return acc <= region.radius * region.radius
    if isinstance(region, (Cube, DyadicCube)):
        lo, hi = _bounds(region)
        if len(lo) != mu.dim:
            raise ValueError("region dimension does not match the measure")
        mask = np.ones(len(mu), dtype=bool)
        for i in range(mu.dim):
            mask &= (pts[:, i] >= lo[i]) & (pts[:, i] < hi[i])
        return mask
    raise TypeError(f"unsupported region type: {type(region).__name__}")


def mass(mu: PointMeasure, region) -> float:
    """Total weight of the atoms inside ``region``.

    Cubes are half-open, balls closed.  The sum is correctly rounded
    (``math.fsum``), so enlarging a region never decreases the result.
    """
    mask = _in_region_mask(mu, region)
    if not mask.any():
        return 0.0
    return math.fsum(mu.weights[mask])


def make_radius_grid(
    mu: PointMeasure,
    ratio: float = DEFAULT_GRID_RATIO,
    r_min: float | None = None,
    r_max: float | None = None,
) -> tuple[float, ...]:
    """Geometric radius grid spanning the scales of the support.

    Defaults: from a quarter of the minimum pairwise distance up to at least
    twice the bounding-box diagonal, with consecutive ratio ``2**0.25``.  For
    a single atom the grid degenerates to ``(1.0,)``.
    """
    if not ratio > 1.0:
        raise ValueError("grid ratio must exceed 1")
    if r_min is None:
        sep = mu.min_separation
        r_min = sep / 4.0 if math.isfinite(sep) else 1.0
    if r_max is None:
        ext = mu.extent
        r_max = 2.0 * ext if ext > 0.0 else r_min
    if not (0.0 < r_min <= r_max):
        raise ValueError("radius grid bounds must satisfy 0 < r_min <= r_max")
    grid = [r_min]
    while grid[-1] < r_max:
        if len(grid) > 20000:
            raise ValueError("radius grid span too wide for the given ratio")
        grid.append(grid[-1] * ratio)
    return tuple(grid)


_GRID_NOTE = (
    "estimate restricted to the stated radius grid; atoms make the ratio "
    "mu(B(x,r))/r^n blow up below atomic resolution, so radii under the "
    "grid minimum are intentionally out of scope"
)


def growth_constant(
    mu: PointMeasure, radius_grid: Sequence[float] | None = None
) -> GrowthReport:
    """Estimate ``sup mu(B(x, r)) / r^n`` over support points and grid radii.

    The witness is deterministic: the first maximizer scanning radii in grid
    order and, within a radius, atoms by index.
    """
    if radius_grid is None:
        radius_grid = make_radius_grid(mu)
    grid = tuple(float(r) for r in radius_grid)
    if len(grid) == 0:
        raise ValueError("radius grid must be nonempty")
    if any(not (r > 0.0 and math.isfinite(r)) for r in grid):
        raise ValueError("radii must be positive and finite")
    n = mu.growth_exp
    best = -math.inf
    best_center = 0
    best_radius = grid[0]
    for r in grid:
        masses = _kernels.ball_masses_all_centers(mu.points, mu.weights, r)
        ratios = masses / r**n
        j = int(np.argmax(ratios))
        if ratios[j] > best:
            best = float(ratios[j])
            best_center = j
            best_radius = r
    return GrowthReport(
        c_mu_estimate=best,
        witness=(mu.support_point(best_center), best_radius),
        radius_grid=grid,
        note=_GRID_NOTE,
    )


def normalize_growth(
    mu: PointMeasure, radius_grid: Sequence[float] | None = None
) -> PointMeasure:
    """Rescale weights so the growth estimate on the same grid equals one."""
    if radius_grid is None:
        radius_grid = make_radius_grid(mu)
    report = growth_constant(mu, radius_grid)
    c = report.c_mu_estimate
    if not (c > 0.0 and math.isfinite(c)):
        raise ValueError(f"growth estimate {c} cannot be normalized away")
    if c == 1.0:
        return mu
    return PointMeasure(mu.dim, mu.growth_exp, mu.points, mu.weights / c)


def is_doubling(mu: PointMeasure, region, alpha: float, beta: float) -> bool:
    """Whether ``mass(alpha * region) <= beta * mass(region)``.

    Regions of zero mass are never doubling: averages over them would be
    undefined, so they are excluded from every supremum built downstream.
    """
    if alpha < 1.0:
        raise ValueError("dilation factor must be at least 1")
    if beta <= 0.0:
        raise ValueError("doubling threshold must be positive")
    if isinstance(region, DyadicCube):
        region = region.as_cube()
    small = mass(mu, region)
    if small == 0.0:
        return False
    return mass(mu, dilate(region, alpha)) <= beta * small


# -- generators ---------------------------------------------------------------

GENERATOR_KINDS = (
    "uniform_cube",
    "segment_in_plane",
    "power_law_density",
    "cantor_product",
    "accumulating_atoms",
)

# accumulating_atoms caps its weight range so total/minimum stays within 2^28;
# the lattice builder's concentration threshold then covers every support ball
_ACCUMULATION_BUDGET = 2.0 ** 28


def _snap_off_boundaries(coords: np.ndarray) -> np.ndarray:
    """Snap coordinates to the odd grid (2m+1)/2^41, resolving collisions.

    Collisions are bumped deterministically to the next odd grid point in the
    last axis (repeated until rows are distinct).
    """
    arr = np.asarray(coords, dtype=np.float64)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr.reshape(-1, 1)
    m = np.floor(np.ldexp(arr, _SNAP_BITS - 1)).astype(np.int64)
    for _ in range(64):
        order = np.lexsort(m.T)
        sm = m[order]
        dup_sorted = np.zeros(m.shape[0], dtype=bool)
        dup_sorted[1:] = np.all(sm[1:] == sm[:-1], axis=1)
        if not dup_sorted.any():
            break
        dup_rows = order[dup_sorted]
        m[dup_rows, -1] += 1
    else:
        raise RuntimeError("could not separate snapped coordinates")
    out = np.ldexp((2 * m + 1).astype(np.float64), -_SNAP_BITS)
    return out.reshape(-1) if squeeze else out


def _reject_unknown(params: dict, allowed: Iterable[str], kind: str) -> None:
    extra = set(params) - set(allowed)
    if extra:
        raise ValueError(f"unknown parameters for {kind}: {sorted(extra)}")


def _gen_uniform_cube(rng: np.random.Generator, params: dict):
    _reject_unknown(params, {"count", "dim", "n"}, "uniform_cube")
    count = int(params.get("count", 100))
    dim = int(params.get("dim", 1))
    n = float(params.get("n", dim))
    if count < 1:
        raise ValueError("count must be positive")
    pts = rng.random((count, dim))
    w = np.full(count, 1.0 / count)
    return dim, n, pts, w


def _gen_segment_in_plane(rng: np.random.Generator, params: dict):
    _reject_unknown(params, {"count", "dim", "n"}, "segment_in_plane")
    if int(params.get("dim", 2)) != 2 or float(params.get("n", 1)) != 1.0:
        raise ValueError("segment_in_plane is fixed to dim=2, n=1")
    count = int(params.get("count", 100))
    if count < 1:
        raise ValueError("count must be positive")
    t = rng.random(count)
    pts = np.stack([t, t], axis=1)  # the diagonal of the unit square
    w = np.full(count, 1.0 / count)
    return 2, 1.0, pts, w


def _gen_power_law_density(rng: np.random.Generator, params: dict):
    _reject_unknown(params, {"count", "dim", "n", "a"}, "power_law_density")
    count = int(params.get("count", 100))
    dim = int(params.get("dim", 1))
    n = float(params.get("n", dim))
    a = float(params.get("a", 0.5))
    if count < 1:
        raise ValueError("count must be positive")
    if not a > 0.0:
        raise ValueError("power-law exponent a must be positive")
    if a >= n:
        raise ValueError(
            f"power-law exponent a={a} must stay below the growth exponent n={n}; "
            "otherwise the mass near the singular point cannot be normalized on any grid"
        )
    pts = rng.random((count, dim))
    center = np.full(dim, 0.5)
    dist = np.sqrt(np.sum((pts - center) ** 2, axis=1))
    w = np.maximum(dist, 2.0**-20) ** (-a)  # truncated at the grid floor
    return dim, n, pts, w


def _cantor_depth_cap(dim: int) -> int:
    # weight spread 3^(depth*dim) must respect the accumulation budget
    return int(math.floor(math.log(_ACCUMULATION_BUDGET) / (dim * math.log(3.0))))


def _gen_cantor_product(rng: np.random.Generator, params: dict):
    _reject_unknown(params, {"depth", "split", "dim", "n"}, "cantor_product")
    depth = int(params.get("depth", 5))
    dim = int(params.get("dim", 1))
    split = tuple(float(s) for s in params.get("split", (1.0 / 3.0, 2.0 / 3.0)))
    n = float(params.get("n", dim * math.log(2.0) / math.log(3.0)))
    if depth < 1:
        raise ValueError("depth must be positive")
    cap = _cantor_depth_cap(dim)
    if depth > cap:
        raise ValueError(
            f"cantor_product depth {depth} exceeds {cap} for dim={dim}: the weight "
            "spread would overrun the concentration budget of the lattice builder"
        )
    if len(split) != 2 or min(split) <= 0.0 or abs(split[0] + split[1] - 1.0) > 1e-9:
        raise ValueError("split must be two positive fractions summing to 1")
    # one axis: cells of the middle-thirds construction, mass split[w] at letter w
    axis_pts = np.zeros(1)
    axis_w = np.ones(1)
    scale = 1.0
    for _ in range(depth):
        scale /= 3.0
        # each cell [x, x + 3*scale) refines to [x, x+scale) and [x+2*scale, x+3*scale)
        axis_pts = np.concatenate([axis_pts, axis_pts + 2.0 * scale])
        axis_w = np.concatenate([axis_w * split[0], axis_w * split[1]])
    mid = axis_pts + scale / 2.0
    pts = mid.reshape(-1, 1)
    w = axis_w
    for _ in range(dim - 1):
        m = pts.shape[0]
        k = mid.shape[0]
        pts = np.concatenate(
            [np.repeat(pts, k, axis=0), np.tile(mid, m).reshape(-1, 1)], axis=1
        )
        w = np.repeat(w, k) * np.tile(axis_w, m)
    return dim, n, pts, w


def _accumulation_levels(count: int, ratio: float) -> int:
    best = 1
    for s in range(1, min(count, 40) + 1):
        spread = (math.ceil(count / s) / (1.0 - ratio)) * ratio ** (1 - s)
        if spread <= _ACCUMULATION_BUDGET:
            best = s
    return best


def _gen_accumulating_atoms(rng: np.random.Generator, params: dict):
    _reject_unknown(params, {"count", "ratio", "dim", "n"}, "accumulating_atoms")
    count = int(params.get("count", 100))
    ratio = float(params.get("ratio", 0.5))
    dim = int(params.get("dim", 1))
    n = float(params.get("n", 1.0))
    if count < 1:
        raise ValueError("count must be positive")
    if not (0.0 < ratio <= 0.6):
        raise ValueError("ratio must lie in (0, 0.6] so the scale bands stay disjoint")
    levels = _accumulation_levels(count, ratio)
    s = (np.arange(count) * levels) // count  # level of atom i, nondecreasing
    w = ratio ** s.astype(np.float64)
    pts = np.zeros((count, dim))
    # band s occupies [ratio^s, 1.25 * ratio^s) on the first axis; bands are
    # disjoint because 1/ratio > 1.25
    for lvl in range(levels):
        idx = np.nonzero(s == lvl)[0]
        offs = (np.arange(idx.size) + 0.5) / (4.0 * idx.size)
        pts[idx, 0] = ratio**lvl * (1.0 + offs)
    return dim, n, pts, w


_GENERATORS = {
    "uniform_cube": _gen_uniform_cube,
    "segment_in_plane": _gen_segment_in_plane,
    "power_law_density": _gen_power_law_density,
    "cantor_product": _gen_cantor_product,
    "accumulating_atoms": _gen_accumulating_atoms,
}


def generate(kind: str, seed: int = 0, **params) -> PointMeasure:
    """Build a named test measure, already growth-normalized.

    Deterministic in ``seed``.  Coordinates are snapped to the odd grid
    ``(2m+1)/2^41``, which avoids every shifted dyadic cube boundary down to
    generation 40 (see the note at the top of this module).

    Kinds: ``uniform_cube`` (equal weights, unit cube), ``segment_in_plane``
    (dim 2, growth exponent 1, atoms on the diagonal), ``power_law_density``
    (weights ``|x - center|^-a``, requires ``a < n``), ``cantor_product``
    (unequal-split Cantor weights, the standard nondoubling example) and
    ``accumulating_atoms`` (geometric weights on geometrically shrinking
    scale bands).
    """
    try:
        builder = _GENERATORS[kind]
    except KeyError:
        raise ValueError(f"unknown kind {kind!r}; choose from {GENERATOR_KINDS}") from None
    rng = np.random.default_rng(seed)
    dim, n, pts, w = builder(rng, dict(params))
    pts = _snap_off_boundaries(pts)
    mu = PointMeasure(dim, n, pts, w)
    return normalize_growth(mu)


# -- persistence ---------------------------------------------------------------


def save_measure(mu: PointMeasure, path) -> None:
    """Write the JSON form {"dim", "n", "points", "weights"}."""
    payload = {
        "dim": mu.dim,
        "n": mu.growth_exp,
        "points": [[float(c) for c in row] for row in mu.points],
        "weights": [float(w) for w in mu.weights],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_measure(path) -> PointMeasure:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    try:
        return PointMeasure(
            int(payload["dim"]),
            float(payload["n"]),
            np.asarray(payload["points"], dtype=np.float64),
            np.asarray(payload["weights"], dtype=np.float64),
        )
    except KeyError as exc:
        raise ValueError(f"measure file is missing field {exc}") from None


def load_measure_csv(path, growth_exp: float) -> PointMeasure:
    """Read atoms from CSV: one row per atom, coordinates then weight.

    The dimension is the column count minus one; a non-numeric first row is
    treated as a header and skipped.
    """
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for i, rec in enumerate(csv.reader(fh)):
            if not rec:
                continue
            try:
                rows.append([float(x) for x in rec])
            except ValueError:
                if i == 0:
                    continue
                raise ValueError(f"non-numeric CSV row {i+1}") from None
    if not rows:
        raise ValueError("CSV file holds no atoms")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError("CSV rows have inconsistent column counts")
    if width - 1 not in (1, 2, 3):
        raise ValueError("CSV must have d coordinate columns plus one weight column")
    arr = np.asarray(rows, dtype=np.float64)
    return PointMeasure(width - 1, growth_exp, arr[:, :-1], arr[:, -1])
