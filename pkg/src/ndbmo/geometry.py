"""Axis-aligned geometry: points, half-open cubes, closed balls, concentric
dilation, and the shifted dyadic grids.

Conventions (fixed once, relied on everywhere):

- cubes are half-open boxes ``[c_i - s/2, c_i + s/2)`` so each dyadic
  generation partitions R^d exactly;
- balls are closed;
- all distances are Euclidean;
- a shifted dyadic system with shift ``s in {0, 1/3, 2/3}^d`` has
  generation-k cubes of side ``2^-k`` with corners on the lattice
  ``2^-k (Z^d + (-1)^k s)``.  The sign alternation keeps consecutive
  generations nested (``3 s`` is integral, so halving a generation-k cube
  lands on the generation-(k+1) lattice).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product
from typing import Iterator, Optional, Union

import numpy as np

__all__ = [
    "Point",
    "Cube",
    "Ball",
    "DyadicSystem",
    "DyadicCube",
    "dilate",
    "contains",
    "intersects",
    "distance",
    "set_distance",
    "smallest_containing_dyadic",
    "DEFAULT_COARSEST_SIDE",
]

DEFAULT_COARSEST_SIDE = 2.0**10


@dataclass(frozen=True)
class Point:
    """A point of R^d, d in {1, 2, 3}."""

    coords: tuple[float, ...]

    def __post_init__(self) -> None:
        coords = tuple(float(c) for c in self.coords)
        object.__setattr__(self, "coords", coords)
        if not 1 <= len(coords) <= 3:
            raise ValueError(f"dimension {len(coords)} not in {{1,2,3}}")
        if not all(math.isfinite(c) for c in coords):
            raise ValueError("non-finite coordinate")

    @property
    def dim(self) -> int:
        return len(self.coords)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.coords, dtype=float)


@dataclass(frozen=True)
class Cube:
    """Axis-aligned half-open cube: ``[center_i - side/2, center_i + side/2)``."""

    center: Point
    side: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "side", float(self.side))
        if not (self.side > 0 and math.isfinite(self.side)):
            raise ValueError(f"side must be positive and finite, got {self.side}")

    @property
    def dim(self) -> int:
        return self.center.dim

    @property
    def lo(self) -> np.ndarray:
        return self.center.as_array() - 0.5 * self.side

    @property
    def hi(self) -> np.ndarray:
        return self.center.as_array() + 0.5 * self.side


@dataclass(frozen=True)
class Ball:
    """Closed Euclidean ball."""

    center: Point
    radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "radius", float(self.radius))
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ValueError(f"radius must be positive and finite, got {self.radius}")

    @property
    def dim(self) -> int:
        return self.center.dim


Shape = Union[Cube, Ball]
CubeLike = Union[Cube, "DyadicCube"]


def _bounds(shape: CubeLike) -> tuple[np.ndarray, np.ndarray]:
    # DyadicCube corners come from exact lattice arithmetic; going through
    # Cube(center, side) can drift them by an ulp, so read them directly
    return shape.lo, shape.hi


def dilate(shape: Shape, lam: float) -> Shape:
    """Concentric dilation: same center, side/radius scaled by ``lam > 0``."""
    lam = float(lam)
    if not (lam > 0 and math.isfinite(lam)):
        raise ValueError(f"dilation factor must be positive and finite, got {lam}")
    if isinstance(shape, Cube):
        return Cube(shape.center, shape.side * lam)
    if isinstance(shape, Ball):
        return Ball(shape.center, shape.radius * lam)
    raise TypeError(f"cannot dilate {type(shape).__name__}")


def _check_dims(a, b) -> None:
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")


def distance(a: Point, b: Point) -> float:
    _check_dims(a, b)
    return float(np.linalg.norm(a.as_array() - b.as_array()))


def contains(outer, inner) -> bool:
    """Set containment under the half-open-cube / closed-ball convention.

    Accepts ``Cube``, ``Ball``, ``DyadicCube`` and ``Point`` operands.
    Cube-in-ball is decided on the cube's closure (every closure corner within
    the radius), so a True answer always certifies genuine containment; for the
    open faces this is conservative by a null set only.
    """
    _check_dims(outer, inner)
    outer_cubish = not isinstance(outer, Ball)
    if isinstance(inner, Point):
        x = inner.as_array()
        if outer_cubish:
            lo, hi = _bounds(outer)
            return bool(np.all(lo <= x) and np.all(x < hi))
        return bool(np.linalg.norm(x - outer.center.as_array()) <= outer.radius)

    inner_cubish = not isinstance(inner, Ball)
    if outer_cubish and inner_cubish:
        olo, ohi = _bounds(outer)
        ilo, ihi = _bounds(inner)
        return bool(np.all(olo <= ilo) and np.all(ihi <= ohi))
    if outer_cubish:
        # closed ball inside a half-open cube: strict on the open faces
        lo, hi = _bounds(outer)
        c = inner.center.as_array()
        return bool(np.all(lo <= c - inner.radius) and np.all(c + inner.radius < hi))
    if inner_cubish:
        c = outer.center.as_array()
        lo, hi = _bounds(inner)
        corners = np.array(list(product(*zip(lo, hi))))
        return bool(np.max(np.linalg.norm(corners - c, axis=1)) <= outer.radius)
    gap = distance(outer.center, inner.center)
    return gap + inner.radius <= outer.radius


def intersects(a, b) -> bool:
    """Nonempty intersection of the two bodies (half-open cubes, closed balls)."""
    _check_dims(a, b)
    a_ball, b_ball = isinstance(a, Ball), isinstance(b, Ball)
    if not a_ball and not b_ball:
        alo, ahi = _bounds(a)
        blo, bhi = _bounds(b)
        return bool(np.all(alo < bhi) and np.all(blo < ahi))
    if a_ball and b_ball:
        return distance(a.center, b.center) <= a.radius + b.radius
    cube, ball = (a, b) if b_ball else (b, a)
    # nearest point of the cube's closure to the ball center; exact up to the
    # open faces, which carry no support points by generator design
    lo, hi = _bounds(cube)
    c = ball.center.as_array()
    nearest = np.clip(c, lo, hi)
    return bool(np.linalg.norm(nearest - c) <= ball.radius)


def set_distance(a, b) -> float:
    """Euclidean distance between the two bodies (0 if they meet)."""
    _check_dims(a, b)
    a_ball, b_ball = isinstance(a, Ball), isinstance(b, Ball)
    if a_ball and b_ball:
        return max(0.0, distance(a.center, b.center) - (a.radius + b.radius))
    if not a_ball and not b_ball:
        alo, ahi = _bounds(a)
        blo, bhi = _bounds(b)
        gaps = np.maximum(0.0, np.maximum(alo - bhi, blo - ahi))
        return float(np.linalg.norm(gaps))
    cube, ball = (a, b) if b_ball else (b, a)
    lo, hi = _bounds(cube)
    c = ball.center.as_array()
    nearest = np.clip(c, lo, hi)
    return max(0.0, float(np.linalg.norm(nearest - c)) - ball.radius)


def _eps(k: int) -> int:
    return 1 if k % 2 == 0 else -1


def _corner_coord(k: int, m: int, eps_sigma: int) -> float:
    # single source of truth for corner floats: (3m + eps*sigma) * 2^-k / 3
    return math.ldexp((3 * m + eps_sigma) / 3.0, -k)


@dataclass(frozen=True)
class DyadicSystem:
    """One of the 3^d shifted dyadic systems.

    ``sigma`` holds the shift numerators: shift = sigma / 3 with
    ``sigma in {0, 1, 2}^d``.  Integer positions keep all grid arithmetic
    exact; corner coordinates are derived floats.
    """

    sigma: tuple[int, ...]

    def __post_init__(self) -> None:
        sigma = tuple(int(s) for s in self.sigma)
        object.__setattr__(self, "sigma", sigma)
        if not 1 <= len(sigma) <= 3:
            raise ValueError(f"dimension {len(sigma)} not in {{1,2,3}}")
        if any(s not in (0, 1, 2) for s in sigma):
            raise ValueError(f"shift numerators must lie in {{0,1,2}}, got {sigma}")

    @property
    def dim(self) -> int:
        return len(self.sigma)

    @property
    def shift(self) -> tuple[float, ...]:
        return tuple(s / 3.0 for s in self.sigma)

    def locate(self, k: int, x) -> tuple[int, ...]:
        """Lattice position of the generation-k cube containing ``x``.

        ``x`` may be a Point or any coordinate sequence of matching length.
        """
        coords = x.coords if isinstance(x, Point) else tuple(float(c) for c in x)
        if len(coords) != self.dim:
            raise ValueError(f"dimension mismatch: {len(coords)} vs {self.dim}")
        e = _eps(k)
        return tuple(
            math.floor(math.ldexp(c, k) - e * s / 3.0) for c, s in zip(coords, self.sigma)
        )

    def cube_at(self, k: int, pos: tuple[int, ...]) -> "DyadicCube":
        return DyadicCube(self, int(k), tuple(int(p) for p in pos))

    def cube_containing(self, k: int, x) -> "DyadicCube":
        return self.cube_at(k, self.locate(k, x))


@dataclass(frozen=True)
class DyadicCube:
    """A generation-``k`` cube of one shifted system, addressed by its integer
    lattice position.  ``as_cube()`` exposes it to the generic geometry API."""

    system: DyadicSystem
    k: int
    pos: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.pos) != self.system.dim:
            raise ValueError("position dimension does not match system")

    @property
    def dim(self) -> int:
        return self.system.dim

    @property
    def side(self) -> float:
        return math.ldexp(1.0, -self.k)

    @property
    def lo(self) -> np.ndarray:
        e = _eps(self.k)
        return np.array(
            [_corner_coord(self.k, m, e * s) for m, s in zip(self.pos, self.system.sigma)]
        )

    @property
    def hi(self) -> np.ndarray:
        # same helper as lo (with m+1) so corners shared across generations
        # land on bit-identical floats
        e = _eps(self.k)
        return np.array(
            [_corner_coord(self.k, m + 1, e * s) for m, s in zip(self.pos, self.system.sigma)]
        )

    @property
    def center(self) -> Point:
        return Point(tuple(self.lo + 0.5 * self.side))

    def as_cube(self) -> Cube:
        return Cube(self.center, self.side)

    def parent(self) -> "DyadicCube":
        e = _eps(self.k)
        pos = tuple((m + e * s) >> 1 for m, s in zip(self.pos, self.system.sigma))
        return DyadicCube(self.system, self.k - 1, pos)

    def children(self) -> Iterator["DyadicCube"]:
        e = _eps(self.k)
        base = tuple(2 * m + e * s for m, s in zip(self.pos, self.system.sigma))
        for t in product((0, 1), repeat=self.dim):
            yield DyadicCube(self.system, self.k + 1, tuple(b + ti for b, ti in zip(base, t)))

    def key(self) -> tuple:
        return (self.system.sigma, self.k, self.pos)


def _scan_start_k(side: float) -> int:
    # coarsest generation whose side does not exceed... we want the finest k
    # with 2^-k >= side: containment is impossible below that scale
    frac, e = math.frexp(side)  # side = frac * 2^e, frac in [0.5, 1)
    return 1 - e if frac == 0.5 else -e


def smallest_containing_dyadic(
    system: DyadicSystem,
    q: Cube,
    coarsest_side: float = DEFAULT_COARSEST_SIDE,
) -> Optional[DyadicCube]:
    """Minimal-side cube of the system containing ``q``, or ``None`` if no
    generation down to ``coarsest_side`` contains it without straddling.

    Scanning fine-to-coarse returns the true minimum: the system's cubes
    containing ``q`` form a nested chain, so the first hit is the smallest.
    """
    if q.dim != system.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {system.dim}")
    if q.side > coarsest_side:
        return None
    lo, hi = q.lo, q.hi
    corner = Point(tuple(lo))
    k = _scan_start_k(q.side)
    # coarsest generation allowed: largest power-of-2 side not exceeding the cap
    k_stop = 1 - math.frexp(coarsest_side)[1]
    while k >= k_stop:
        cand = system.cube_containing(k, corner)
        if np.all(cand.lo <= lo) and np.all(hi <= cand.hi):
            return cand
        k -= 1
    return None
