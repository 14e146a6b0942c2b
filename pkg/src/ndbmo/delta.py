"""Proximity functional between regions of comparable or nested scales.

``delta_cubes(mu, Q, R)`` evaluates 1 + the sum over support points in the
doubled outer region minus the doubled inner region of w(y) / |x_Q - y|^n,
where x_Q is the inner region's center and n the measure's growth exponent.
It quantifies how much mass sits between the scales of Q and R, weighted by
distance; two regions of comparable size have a value near 1 regardless of
how the measure concentrates.  ``delta_dm`` is the same functional for
nested filtration atoms, with the atom core balls dilated by the lattice
alpha instead of 2.

Integrals over a finite atomic measure are exact sums (``math.fsum``), so
the only tolerance anywhere is floating point.  The report helpers at the
bottom measure the functional's regularity over built filtrations; they
report rather than assert, since the comparability constants they probe are
not pinned down by theory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Ball, Cube, DyadicCube, dilate
from .lattice import Atom, Filtration
from .measure import PointMeasure, _in_region_mask, make_radius_grid

__all__ = [
    "DeltaValue",
    "delta_cubes",
    "delta_dm",
    "monotonicity_report",
    "comparable_scale_report",
    "parent_regularity_report",
    "dm_vs_cubes_report",
]


@dataclass(frozen=True)
class DeltaValue:
    """Proximity value with an optional per-point audit trail.

    ``terms`` holds (support index, contribution) pairs for every point that
    entered the sum; ``value`` is 1 plus their correctly rounded total.
    """

    value: float
    terms: tuple | None = None

    def __post_init__(self) -> None:
        if not self.value >= 1.0:
            raise ValueError(f"proximity value must be at least 1, got {self.value}")

    def __float__(self) -> float:
        return self.value


def _as_region(obj):
    if isinstance(obj, DyadicCube):
        return obj.as_cube()
    if isinstance(obj, (Cube, Ball)):
        return obj
    raise TypeError(f"expected Cube, DyadicCube or Ball, got {type(obj).__name__}")


def _bodies_intersect(a, b) -> bool:
    # half-open cubes, closed balls; the mixed case tests against the box
    # closure (exact up to the removed faces, a null set)
    a_ball = isinstance(a, Ball)
    b_ball = isinstance(b, Ball)
    if a_ball and b_ball:
        d = math.dist(a.center.coords, b.center.coords)
        return d <= a.radius + b.radius
    if not a_ball and not b_ball:
        return bool(np.all(a.lo < b.hi) and np.all(b.lo < a.hi))
    ball, box = (a, b) if a_ball else (b, a)
    c = np.asarray(ball.center.coords)
    nearest = np.clip(c, box.lo, box.hi)
    return float(np.linalg.norm(c - nearest)) <= ball.radius


def _sum_over_annulus(
    mu: PointMeasure, base, outer_region, inner_region, with_terms: bool
) -> DeltaValue:
    mask = _in_region_mask(mu, outer_region) & ~_in_region_mask(mu, inner_region)
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return DeltaValue(1.0, terms=() if with_terms else None)
    diffs = mu.points[idx] - np.asarray(base.coords)
    dists = np.sqrt(np.einsum("ij,ij->i", diffs, diffs))
    # the base point lies inside the subtracted region, so nothing summed
    # can coincide with it
    assert (dists > 0.0).all(), "summation region touched the base point"
    contribs = mu.weights[idx] / dists**mu.growth_exp
    value = 1.0 + math.fsum(float(c) for c in contribs)
    terms = None
    if with_terms:
        terms = tuple((int(i), float(c)) for i, c in zip(idx, contribs))
    return DeltaValue(value, terms=terms)


def delta_cubes(mu: PointMeasure, q, r, *, with_terms: bool = False) -> DeltaValue:
    """Proximity of two intersecting regions (cubes or balls).

    Value: 1 + sum over support points y in 2R minus 2Q of
    w(y) / |x_Q - y|^n.  The bodies must intersect; the functional is not
    defined for distant regions.  Neither region needs to carry mass.
    """
    q = _as_region(q)
    r = _as_region(r)
    if q.dim != mu.dim or r.dim != mu.dim:
        raise ValueError("region dimension does not match the measure")
    if not _bodies_intersect(q, r):
        raise ValueError("regions do not intersect; proximity is undefined for distant regions")
    return _sum_over_annulus(mu, q.center, dilate(r, 2.0), dilate(q, 2.0), with_terms)


def _members_nested(q: Atom, r: Atom) -> bool:
    if q.level < r.level:
        return False
    return bool(np.isin(q.members, r.members).all())


def delta_dm(
    mu: PointMeasure, q: Atom, r: Atom, alpha: float, *, with_terms: bool = False
) -> DeltaValue:
    """Proximity of nested filtration atoms through their core balls.

    Value: 1 + sum over y in alpha*B_R minus alpha*B_Q of
    w(y) / |center(B_Q) - y|^n.  ``r`` must be an ancestor of ``q`` (or q
    itself), which within one filtration is equivalent to the member
    containment this function checks.
    """
    for a in (q, r):
        if not isinstance(a, Atom):
            raise TypeError(f"expected Atom, got {type(a).__name__}")
    if not alpha >= 1.0:
        raise ValueError(f"alpha must be at least 1, got {alpha}")
    if not _members_nested(q, r):
        raise ValueError(
            "atoms are not nested: the first argument's members must be "
            "contained in the second's (take ancestor pairs of one filtration)"
        )
    return _sum_over_annulus(
        mu, q.ball.center, dilate(r.ball, alpha), dilate(q.ball, alpha), with_terms
    )


# ---------------------------------------------------------------------------
# property reports


def monotonicity_report(mu: PointMeasure, triples: Sequence[tuple]) -> dict:
    """Check the two-sided monotonicity of the functional on nested triples.

    Each triple (Q, R, T) must satisfy Q inside R inside T (body
    containment).  Two separate checks per triple:

    * first half, same base point: delta(Q,R) <= delta(Q,T).  Exact whenever
      2R is contained in 2T (the summation region only grows), so those
      triples are tallied separately and a violation there is a bug.
    * full statement: max(delta(Q,R), delta(R,T)) <= delta(Q,T).  The second
      operand changes base point, so this carries hidden comparability
      constants; violations are reported, never raised.
    """
    from .geometry import contains

    n_first_applicable = n_first_ok = n_max_ok = 0
    max_violations = []
    worst = 0.0
    for ti, (q, r, t) in enumerate(triples):
        q, r, t = _as_region(q), _as_region(r), _as_region(t)
        if not (contains(r, q) and contains(t, r)):
            raise ValueError(f"triple {ti} is not nested (Q inside R inside T)")
        d_qr = delta_cubes(mu, q, r).value
        d_rt = delta_cubes(mu, r, t).value
        d_qt = delta_cubes(mu, q, t).value
        if contains(dilate(t, 2.0), dilate(r, 2.0)):
            n_first_applicable += 1
            n_first_ok += d_qr <= d_qt
        ratio = max(d_qr, d_rt) / d_qt
        worst = max(worst, ratio)
        if ratio <= 1.0:
            n_max_ok += 1
        else:
            max_violations.append({"triple": ti, "excess": ratio})
    return {
        "n_triples": len(triples),
        "n_first_half_applicable": n_first_applicable,
        "n_first_half_ok": n_first_ok,
        "n_max_ok": n_max_ok,
        "max_violations": max_violations,
        "worst_excess": worst,
    }


def comparable_scale_report(
    mu: PointMeasure,
    pairs: Sequence[tuple],
    radius_grid: Sequence[float] | None = None,
) -> dict:
    """Proximity of comparable-scale cube pairs against a derived ceiling.

    For intersecting cube pairs with side ratio in [1, 2], the value minus 1
    is summed over at most a handful of dyadic annuli around x_Q, and each
    annulus holds at most the mass of a covering ball, which the normalized
    growth estimate bounds by its radius to the n.  The resulting ceiling is

        1 + sum over annuli of G(outer + e) / inner^n,

    with G the grid growth envelope (smallest grid radius at or above the
    argument, to the n, capped by the total mass) and ``e`` the distance
    from x_Q to the nearest support point, which transports the envelope to
    off-support centers.  Valid whenever the measure's growth estimate on
    ``radius_grid`` is at most 1 (the default grid is the one the generators
    normalize on), so the comparison below is a theorem, not a heuristic:
    violations indicate a bug.

    Pairs outside the side-ratio window or with disjoint bodies are skipped
    and counted, not raised: callers feed bulk samples.
    """
    grid = tuple(make_radius_grid(mu) if radius_grid is None else sorted(float(g) for g in radius_grid))
    n = mu.growth_exp
    total = mu.total_mass
    gmax = grid[-1]

    def envelope(t: float) -> float:
        if t <= gmax:
            i = int(np.searchsorted(np.asarray(grid), t, side="left"))
            return min(total, grid[i] ** n)
        return total

    n_window = n_disjoint = n_violations = 0
    rows = []
    for q, r in pairs:
        q = _as_region(q)
        r = _as_region(r)
        if not (isinstance(q, Cube) and isinstance(r, Cube)):
            raise TypeError("comparable-scale pairs must be cubes")
        ratio = r.side / q.side
        if not 1.0 <= ratio <= 2.0:
            n_window += 1
            continue
        if not _bodies_intersect(q, r):
            n_disjoint += 1
            continue
        value = delta_cubes(mu, q, r).value
        ell_q = q.side / 2.0
        ell_r = r.side / 2.0
        rd = math.sqrt(mu.dim)
        sep = math.dist(q.center.coords, r.center.coords)
        r_out = 2.0 * rd * ell_r + sep
        e = float(
            np.sqrt(
                ((mu.points - np.asarray(q.center.coords)) ** 2).sum(axis=1)
            ).min()
        )
        bound = 1.0
        inner = ell_q
        while inner < r_out:
            outer = min(2.0 * inner, r_out)
            bound += envelope(outer + e) / inner**n
            inner *= 2.0
        ok = value <= bound
        n_violations += not ok
        rows.append({"side_ratio": ratio, "delta": value, "bound": bound, "ok": ok})
    return {
        "n_pairs": len(pairs),
        "n_checked": len(rows),
        "n_skipped_window": n_window,
        "n_skipped_disjoint": n_disjoint,
        "n_violations": n_violations,
        "max_delta": max((r["delta"] for r in rows), default=math.nan),
        "rows": rows,
    }


def parent_regularity_report(
    filt: Filtration,
    mu: PointMeasure,
    *,
    ceiling: float | None = None,
    max_atoms: int | None = None,
) -> dict:
    """Distribution of the atom-to-parent proximity over a filtration.

    Computes the functional for every non-root atom against its parent
    (``max_atoms`` caps the count by a deterministic stride).  ``ceiling``
    turns the report into a pass/fail check; without it the distribution is
    informational.
    """
    alpha = filt.params.alpha
    atoms = [
        a for gen in filt.gens[1:] for a in filt.level_atoms(gen)
    ]
    if max_atoms is not None and len(atoms) > max_atoms:
        sel = np.unique(np.linspace(0, len(atoms) - 1, max_atoms).astype(int))
        atoms = [atoms[i] for i in sel]
    values = np.array(
        [delta_dm(mu, a, filt.parent(a), alpha).value for a in atoms]
    )
    above = passed = None
    if ceiling is not None:
        above = int((values > ceiling).sum())
        passed = above == 0
    return {
        "n": len(atoms),
        "alpha": alpha,
        "values": values,
        "max": float(values.max()) if values.size else math.nan,
        "mean": float(values.mean()) if values.size else math.nan,
        "ceiling": ceiling,
        "n_above": above,
        "passed": passed,
    }


def dm_vs_cubes_report(
    filt: Filtration, mu: PointMeasure, *, max_pairs: int = 400
) -> dict:
    """Ratio of the atom form to the ball form over nested atom pairs.

    For sampled (atom, ancestor) pairs at every depth, compares
    ``delta_dm(Q, R, alpha)`` with ``delta_cubes(B_Q, B_R)``.  The two are
    claimed comparable; the report records the observed ratio range.  Pairs
    whose core balls do not intersect fall outside the ball form's domain
    and are skipped with a count.
    """
    alpha = filt.params.alpha
    pairs = []
    for gen in filt.gens[1:]:
        for a in filt.level_atoms(gen):
            depth = 1
            node = a
            while node.parent is not None:
                node = filt.parent(node)
                pairs.append((a, node, depth))
                depth += 1
    if len(pairs) > max_pairs:
        sel = np.unique(np.linspace(0, len(pairs) - 1, max_pairs).astype(int))
        pairs = [pairs[i] for i in sel]
    rows = []
    n_disjoint = 0
    for a, anc, depth in pairs:
        if not _bodies_intersect(a.ball, anc.ball):
            n_disjoint += 1
            continue
        dm = delta_dm(mu, a, anc, alpha).value
        cu = delta_cubes(mu, a.ball, anc.ball).value
        rows.append(
            {"atom_id": a.id, "depth": depth, "ratio": dm / cu, "dm": dm, "cubes": cu}
        )
    ratios = [r["ratio"] for r in rows]
    return {
        "n_pairs": len(rows),
        "n_skipped_disjoint": n_disjoint,
        "alpha": alpha,
        "ratio_min": min(ratios) if ratios else math.nan,
        "ratio_max": max(ratios) if ratios else math.nan,
        "rows": rows,
    }
