"""Greedy 5R covering with pre-seeded balls, and doubling-ball searches.

``vitali_preseeded`` runs the classical greedy: the pre-seeded balls (equal
radius R, pairwise disjoint) are taken first, then candidate balls in order
of decreasing radius.  A candidate centered at x that gets rejected meets an
already-selected ball of radius at least its own, so x still lies in the
5-dilate of that blocker; that is what makes 5-dilate coverage unbreakable.

``largest_doubling_ball`` searches a geometric radius grid from above for the
widest (alpha, beta)-doubling ball centered at a support point, falling back
to radius ``r_min`` when no grid radius works.  ``largest_doubling_radii``
is its batched twin used per lattice level; it evaluates masses with the
grid-bucket kernels, whose accumulation order may differ from ``mass`` by
rounding, so verdicts can in principle flip on exact knife-edge ties (never
observed on generated data; both paths are individually deterministic).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .geometry import Ball, Point
from .measure import PointMeasure, make_radius_grid, mass

__all__ = [
    "CoverResult",
    "vitali_preseeded",
    "largest_doubling_ball",
    "largest_doubling_radii",
]


@dataclass(frozen=True)
class CoverResult:
    """Outcome of the pre-seeded greedy cover.

    ``selected[i]`` are pairwise disjoint; ``preseeded_flags[i]`` marks the
    balls that were seeds; ``witness[j]`` indexes a selected ball whose
    5-dilate contains the j-th input point.
    """

    selected: tuple[Ball, ...]
    preseeded_flags: tuple[bool, ...]
    witness: tuple[int, ...]


class _BallHash:
    """Uniform-cell hash over balls for 'who blocks me' queries.

    The cell size must be at least the largest stored radius; a query ball of
    radius at most ``cell`` then only needs the 5^d surrounding cells.
    """

    def __init__(self, dim: int, cell: float):
        self.dim = dim
        self.cell = cell
        self.buckets: dict[tuple[int, ...], list[int]] = {}
        self.centers: list[np.ndarray] = []
        self.radii: list[float] = []

    def _key(self, center: np.ndarray) -> tuple[int, ...]:
        return tuple(int(math.floor(c / self.cell)) for c in center)

    def insert(self, center: np.ndarray, radius: float) -> int:
        idx = len(self.centers)
        self.centers.append(center)
        self.radii.append(radius)
        self.buckets.setdefault(self._key(center), []).append(idx)
        return idx

    def blocking(self, center: np.ndarray, radius: float, margin: float) -> int:
        """Lowest stored index within surface distance ``margin`` (or touching),
        or -1.  Requires radius <= 2 * cell for the neighborhood bound."""
        base = self._key(center)
        best = -1
        reach = int(math.ceil((radius + margin) / self.cell)) + 1
        for offs in itertools.product(range(-reach, reach + 1), repeat=self.dim):
            key = tuple(b + o for b, o in zip(base, offs))
            for idx in self.buckets.get(key, ()):
                d = float(np.linalg.norm(center - self.centers[idx]))
                if d <= radius + self.radii[idx] + margin and (best < 0 or idx < best):
                    best = idx
        return best


def _greedy_disjoint(
    preseeds: Sequence[tuple[np.ndarray, float]],
    candidates: Sequence[tuple[np.ndarray, float, int]],
    separation: float,
) -> tuple[list[int], list[tuple[np.ndarray, float]]]:
    """Sequential greedy core: seeds first, then candidates as given.

    ``candidates`` must already be sorted; each entry carries a caller tag.
    Returns the tags of accepted candidates and the selected balls in
    selection order (seeds first).
    """
    radii = [r for _, r in preseeds] + [r for _, r, _ in candidates]
    if not radii:
        return [], []
    cell = max(radii)
    dim = len(preseeds[0][0]) if preseeds else len(candidates[0][0])
    hash_ = _BallHash(dim, cell)
    selected: list[tuple[np.ndarray, float]] = []
    for center, radius in preseeds:
        hash_.insert(center, radius)
        selected.append((center, radius))
    accepted: list[int] = []
    for center, radius, tag in candidates:
        if hash_.blocking(center, radius, separation) < 0:
            hash_.insert(center, radius)
            selected.append((center, radius))
            accepted.append(tag)
    return accepted, selected


def vitali_preseeded(
    points: Sequence[Point],
    preseeded: Sequence[Ball],
    candidate: Callable[[Point], Ball],
    separation: float = 0.0,
) -> CoverResult:
    """Greedy disjoint cover of ``points`` by 5-dilates, seeds first.

    ``candidate`` is called once for every point not inside any seed ball and
    must return a ball centered at that point with radius not exceeding the
    common seed radius R.  Selection order is all seeds, then candidates by
    radius descending (ties by point index).  With ``separation > 0`` the
    greedy keeps that much surface distance to everything selected; coverage
    then relies on the caller's radii being large against the separation, and
    a breach raises rather than returning a bad cover.
    """
    pts = [p.as_array() for p in points]
    dim = points[0].dim if points else (preseeded[0].dim if preseeded else 0)
    if any(p.dim != dim for p in points) or any(b.dim != dim for b in preseeded):
        raise ValueError("mixed dimensions in cover input")
    if not (separation >= 0.0 and math.isfinite(separation)):
        raise ValueError("separation must be a finite nonnegative value")

    radius_cap = math.inf
    if preseeded:
        radius_cap = preseeded[0].radius
        if any(b.radius != radius_cap for b in preseeded):
            raise ValueError("pre-seeded balls must share one radius")
        for i in range(len(preseeded)):
            ci = preseeded[i].center.as_array()
            for j in range(i + 1, len(preseeded)):
                gap = float(np.linalg.norm(ci - preseeded[j].center.as_array()))
                if gap <= preseeded[i].radius + preseeded[j].radius:
                    raise ValueError(f"pre-seeded balls {i} and {j} intersect")

    seeds = [(b.center.as_array(), b.radius) for b in preseeded]

    # materialize candidates for the points no seed ball covers (two-phase)
    raw: list[tuple[np.ndarray, float, int]] = []
    for j, x in enumerate(pts):
        if any(np.linalg.norm(x - c) <= r for c, r in seeds):
            continue
        ball = candidate(points[j])
        if not isinstance(ball, Ball):
            raise ValueError(f"no candidate ball for uncovered point index {j}")
        if ball.radius > radius_cap:
            raise ValueError(
                f"candidate radius {ball.radius} exceeds the seed radius {radius_cap}"
            )
        if tuple(ball.center.coords) != tuple(points[j].coords):
            raise ValueError(f"candidate for point index {j} is not centered there")
        raw.append((x, ball.radius, j))
    raw.sort(key=lambda t: (-t[1], t[2]))

    _, selected = _greedy_disjoint(seeds, raw, separation)
    balls = tuple(Ball(Point(tuple(map(float, c))), r) for c, r in selected)
    flags = tuple(i < len(seeds) for i in range(len(balls)))

    # the witness lookup mirrors the geometry predicate |x - c| <= 5 r
    witness: list[int] = []
    if balls:
        whash = _BallHash(dim, 5.0 * max(r for _, r in selected))
        for c, r in selected:
            whash.insert(c, 5.0 * r)
        for j, x in enumerate(pts):
            idx = whash.blocking(x, 0.0, 0.0)
            if idx < 0:
                raise RuntimeError(
                    f"cover invariant breach: point index {j} escapes every 5-dilate"
                )
            witness.append(idx)
    elif pts:
        raise RuntimeError("cover invariant breach: no balls selected for nonempty input")
    return CoverResult(balls, flags, tuple(witness))


def _window_radii(
    radius_grid: Sequence[float] | None,
    mu: PointMeasure,
    r_min: float,
    r_max: float,
) -> list[float]:
    if not (0.0 < r_min <= r_max):
        raise ValueError("need 0 < r_min <= r_max")
    grid = make_radius_grid(mu) if radius_grid is None else tuple(radius_grid)
    window = sorted(r for r in grid if r_min <= r <= r_max)
    if not window:
        raise ValueError(
            f"radius grid has no entry inside [{r_min}, {r_max}]; widen the grid"
        )
    return window


def largest_doubling_ball(
    mu: PointMeasure,
    x: Point,
    alpha: float,
    beta: float,
    r_min: float,
    r_max: float,
    radius_grid: Sequence[float] | None = None,
) -> Ball:
    """Widest grid radius in [r_min, r_max] making B(x, r) (alpha, beta)-doubling.

    ``x`` must be a support point, so every centered ball has positive mass.
    When no grid radius qualifies the fallback is ``Ball(x, r_min)``, doubling
    or not.
    """
    row = np.asarray(x.coords, dtype=np.float64)
    if x.dim != mu.dim or not np.any(np.all(mu.points == row, axis=1)):
        raise ValueError("x must be one of the support points")
    window = _window_radii(radius_grid, mu, r_min, r_max)
    total = mu.total_mass
    for r in reversed(window):
        small = mass(mu, Ball(x, r))
        # beta*small >= total certifies doubling without the dilated query
        if beta * small >= total or mass(mu, Ball(x, alpha * r)) <= beta * small:
            return Ball(x, r)
    return Ball(x, r_min)


def largest_doubling_radii(
    mu: PointMeasure,
    alpha: float,
    beta: float,
    r_min: float,
    r_max: float,
    radius_grid: Sequence[float] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched ``largest_doubling_ball`` over every support point.

    Returns (radii, doubling) arrays; points with no doubling grid radius get
    ``r_min`` and a False flag.
    """
    window = _window_radii(radius_grid, mu, r_min, r_max)
    n_pts = len(mu)
    radii = np.full(n_pts, r_min, dtype=np.float64)
    doubling = np.zeros(n_pts, dtype=bool)
    undecided = np.ones(n_pts, dtype=bool)
    total = mu.total_mass
    for r in reversed(window):
        if not undecided.any():
            break
        small = _kernels.ball_masses_all_centers(mu.points, mu.weights, r)
        cheap = beta * small >= total
        if cheap[undecided].all():
            # every undecided ball already holds >= total/beta: doubling
            # certain without the dilated pass
            ok = undecided
        else:
            big = _kernels.ball_masses_all_centers(mu.points, mu.weights, alpha * r)
            ok = undecided & ((big <= beta * small) | cheap)
        radii[ok] = r
        doubling[ok] = True
        undecided &= ~ok
    return radii, doubling
