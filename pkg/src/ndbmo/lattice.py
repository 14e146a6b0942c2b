"""Nested partition lattices indexed by shifted dyadic cubes.

A filtration is a finite tree of atoms.  Each level partitions the support
points into cells; every cell T carries a ball B with B cap supp subset of T
subset of 5B cap supp, cell scales shrink by A0 = 2^b per level, the tree
ascends to a single root and descends to singletons.  We build N = 3^d * b *
M^d filtrations jointly, one per (shifted dyadic system, generation residue
mod b, lattice position class mod M): the doubling dyadic cubes of each
system are split across families so that same-family same-generation cubes
sit far apart, and every such cube Q' is realized as an atom of exactly one
filtration, with ball B(Q') circumscribing Q' (radius sqrt(d) * side / 2).
That realization is what makes cube-to-atom lookup total: any doubling cube
Q is first sandwiched Q subset Q' subset 6Q by the one-third trick and then
resolved through the pre-seed index.

Levels are keyed by dyadic generation k; one filtration uses generations
k_root, k_root + b, ..., k_bot of a fixed residue class.  Ball radii at
generation k live in [s_k / C0, s_k] with s_k = sqrt(d) * 2^(-k-1), so with
C~0 := s_{k_root} the level-t window is the usual [C0^-1 C~0 A0^-t,
C~0 A0^-t].

Selection per level is a margin-separated greedy: pre-seed balls enter
first, candidate balls (the largest doubling ball centered at each uncovered
support point, radii from a geometric grid anchored at s_k) follow in
decreasing radius.  A candidate is dropped when its surface comes within
m_k = 10 * s_{k+b} of a kept ball.  The margin makes cells of the next finer
level (diameter at most 10 * s_{k+b}) meet at most one kept ball, so cells
are grouped bottom-up: a child cell meeting a ball B is forced into B's
cell, the rest join the eligible ball (child inside 5B) with the smallest
center-distance-to-radius ratio.  The bottom level assigns raw points by the
same ratio rule.

Mass enters only through doubling checks.  When total mass <= C0 * min
weight every ball meeting the support is doubling ("vacuous" regime, the
default parameter policy aims for it); otherwise candidate radii can hit the
C0^-1 floor without a doubling certificate and grouping may fail, which
raises rather than silently degrading.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import _kernels
from .covering import largest_doubling_radii
from .geometry import Ball, Cube, DyadicCube, DyadicSystem, Point, _eps
from .measure import DEFAULT_GRID_RATIO, PointMeasure, is_doubling, mass
from .onethird import SystemFamily, cover_cube

__all__ = [
    "LatticeParams",
    "lattice_params",
    "FamilyPartition",
    "partition_families",
    "Atom",
    "assign_points",
    "Filtration",
    "build_filtration",
    "FiltrationFamily",
    "build_family",
    "lookup_cube",
    "verify_theorem_a",
    "TheoremAReport",
    "small_boundary_report",
    "save_family",
    "load_family",
    "LatticeBuildError",
]

DEFAULT_C0_CAP = 2.0**30
DEFAULT_A0 = 16

_FORMAT_NAME = "ndbmo-filtration-family"
_LEVEL_CONVENTION = (
    "atom level = dyadic generation k; a filtration's built levels share one "
    "residue class mod b = log2(a0) and step by b from k_root (single root) "
    "to k_bot (singletons); ball radii at generation k lie in "
    "[s_k / c0, s_k] with s_k = sqrt(dim) * 2^(-k-1)"
)


class LatticeBuildError(RuntimeError):
    """A build-time invariant failed; the message names the invariant."""


def _m_colors(dim: int) -> int:
    # same-family same-generation cubes then sit >= (M-1) * 2^-k apart,
    # which exceeds the 5 * sqrt(d) * 2^-k separation the margin needs
    return math.ceil(5.0 * math.sqrt(dim)) + 2


@dataclass(frozen=True)
class LatticeParams:
    """Resolved build parameters plus the regime flags every run reports.

    ``relaxed_c0`` records that the configured cap truncated the growth-term
    default for ``c0``; ``vacuous`` that total mass <= c0 * min weight (all
    supp-meeting balls doubling, margin guarantees in force);
    ``a0_paper_rule`` that a0 > 5000 * c0 (never at desk scale, reported
    rather than enforced).
    """

    dim: int
    alpha: float
    c0: float
    a0: int
    grid_ratio: float
    relaxed_c0: bool
    vacuous: bool
    a0_paper_rule: bool
    alpha_paper_faithful: bool

    @property
    def b(self) -> int:
        return self.a0.bit_length() - 1

    @property
    def m_colors(self) -> int:
        return _m_colors(self.dim)

    @property
    def alpha0(self) -> float:
        return 6.0 * math.sqrt(self.dim) * self.alpha

    @property
    def preseed_alpha(self) -> float:
        # universe filter; 1/6 of alpha0 so a one-third-trick sandwich
        # transfers the doubling bound from Q to Q'
        return math.sqrt(self.dim) * self.alpha

    @property
    def n_classes(self) -> int:
        return self.m_colors**self.dim

    @property
    def n_families(self) -> int:
        return self.b * self.n_classes

    @property
    def n_systems(self) -> int:
        return 3**self.dim

    @property
    def n_filtrations(self) -> int:
        return self.n_systems * self.n_families

    def as_dict(self) -> dict:
        return {
            "dim": self.dim,
            "alpha": self.alpha,
            "c0": self.c0,
            "a0": self.a0,
            "b": self.b,
            "m_colors": self.m_colors,
            "grid_ratio": self.grid_ratio,
            "relaxed_c0": self.relaxed_c0,
            "vacuous": self.vacuous,
            "a0_paper_rule": self.a0_paper_rule,
            "alpha_paper_faithful": self.alpha_paper_faithful,
        }


def lattice_params(
    mu: PointMeasure,
    *,
    alpha: float | None = None,
    c0: float | None = None,
    c0_cap: float = DEFAULT_C0_CAP,
    a0: int = DEFAULT_A0,
    grid_ratio: float = DEFAULT_GRID_RATIO,
    allow_small_alpha: bool = False,
) -> LatticeParams:
    """Resolve defaults for ``mu``.

    alpha defaults to 480 * sqrt(d).  c0 defaults to the smallest power of
    two exceeding max((6 sqrt(d) alpha)^d, 4 * total / w_min), capped at
    ``c0_cap``; the second term keeps the run in the vacuous regime, the cap
    keeps desk-scale runs tractable (capping is reported, not hidden).
    """
    d = mu.dim
    rd = math.sqrt(d)
    if alpha is None:
        alpha = 480.0 * rd
    if alpha <= 30.0:
        raise ValueError(f"alpha must exceed 30, got {alpha}")
    if alpha <= 60.0 and not allow_small_alpha:
        raise ValueError(
            f"alpha = {alpha} <= 60 needs allow_small_alpha=True (relaxed mode)"
        )
    if not (isinstance(a0, int) and a0 >= 16 and a0 & (a0 - 1) == 0):
        raise ValueError(f"a0 must be an integer power of two >= 16, got {a0}")
    if not grid_ratio > 1.0:
        raise ValueError("grid_ratio must exceed 1")
    growth_term = (6.0 * rd * alpha) ** d
    w_min = float(mu.weights.min())
    mass_term = 4.0 * mu.total_mass / w_min
    if c0 is None:
        target = min(max(growth_term, mass_term), c0_cap)
        c0 = 2.0 ** math.ceil(math.log2(target))
        if c0 <= target:
            c0 *= 2.0
        c0 = min(c0, c0_cap)
    if not c0 > 1.0:
        raise ValueError(f"c0 must exceed 1, got {c0}")
    return LatticeParams(
        dim=d,
        alpha=float(alpha),
        c0=float(c0),
        a0=a0,
        grid_ratio=float(grid_ratio),
        relaxed_c0=bool(c0 < growth_term),
        vacuous=bool(mu.total_mass <= c0 * w_min),
        a0_paper_rule=bool(a0 > 5000.0 * c0),
        alpha_paper_faithful=bool(alpha > 60.0),
    )


# ---------------------------------------------------------------------------
# family partition


def _family_ordinal(k: int, pos: Sequence[int], b: int, m: int) -> int:
    """1-based family index from (generation residue, per-axis position
    residues); stable across generations that agree mod b with positions
    agreeing mod m."""
    cls = 0
    for p in pos:
        cls = cls * m + (int(p) % m)
    return 1 + (int(k) % b) * m ** len(pos) + cls


def _class_of_ordinal(j: int, b: int, m: int, dim: int) -> tuple[int, int]:
    # inverse of _family_ordinal up to the (residue, packed class) pair
    n_cls = m**dim
    if not 1 <= j <= b * n_cls:
        raise ValueError(f"family index {j} outside 1..{b * n_cls}")
    rho, cls = divmod(j - 1, n_cls)
    return rho, cls


@dataclass(frozen=True)
class FamilyPartition:
    """Assignment of one system's dyadic cubes to families.

    ``assignment`` maps ``DyadicCube.key()`` to the 1-based family index;
    ``n_families = b * m^dim``.
    """

    sigma: tuple[int, ...]
    b: int
    m: int
    assignment: dict

    @property
    def n_families(self) -> int:
        return self.b * self.m ** len(self.sigma)

    def family_of(self, cube: DyadicCube) -> int:
        return _family_ordinal(cube.k, cube.pos, self.b, self.m)


def partition_families(cubes: Sequence[DyadicCube], a0: int = DEFAULT_A0) -> FamilyPartition:
    """Split cubes of one shifted system into b * M^d families by
    (generation mod b, position mod M per axis).

    Two same-family cubes of one generation then differ by a multiple of M
    in some axis position, so their distance is at least (M-1) * 2^-k >
    5 sqrt(d) * 2^-k.  Mixing systems is an error.
    """
    if not cubes:
        raise ValueError("need at least one cube")
    if not (isinstance(a0, int) and a0 >= 16 and a0 & (a0 - 1) == 0):
        raise ValueError(f"a0 must be an integer power of two >= 16, got {a0}")
    sigma = cubes[0].system.sigma
    for q in cubes:
        if q.system.sigma != sigma:
            raise ValueError("cubes must all belong to one shifted system")
    b = a0.bit_length() - 1
    m = _m_colors(len(sigma))
    assignment = {q.key(): _family_ordinal(q.k, q.pos, b, m) for q in cubes}
    return FamilyPartition(sigma=sigma, b=b, m=m, assignment=assignment)


# ---------------------------------------------------------------------------
# atoms


@dataclass(frozen=True, eq=False)
class Atom:
    """One cell of one filtration level.

    ``level`` is the dyadic generation of the cell's scale.  ``ball`` is the
    core ball: members lie within its 5-dilate, and every support point of
    the undilated ball is a member.  ``preseed_tag`` is the
    ``DyadicCube.key()`` of the realized cube for pre-seeded atoms (their
    ball circumscribes that cube, so its center is the cube center rather
    than a support point); candidate atoms have ``preseed_tag None`` and a
    ball centered at a support point.
    """

    id: int
    level: int
    ball: Ball
    members: np.ndarray
    parent: int | None
    preseed_tag: tuple | None = None

    def __post_init__(self) -> None:
        members = np.asarray(self.members, dtype=np.int64)
        object.__setattr__(self, "members", np.sort(members))
        self.members.setflags(write=False)

    def __len__(self) -> int:
        return int(self.members.shape[0])

    def mass(self, mu: PointMeasure) -> float:
        return math.fsum(float(mu.weights[i]) for i in self.members)


def assign_points(
    parent: Atom,
    balls: Sequence[Ball],
    mu: PointMeasure,
    *,
    child_level: int | None = None,
) -> list[Atom]:
    """Split ``parent``'s members among ``balls`` by the ratio rule.

    Each point x goes to the ball minimizing |x - x_B| / r(B) among balls
    with x inside 5B (ties to the lower ball index; comparisons
    cross-multiply so ties are exact).  Callers guarantee the balls are
    pairwise disjoint with centers in the parent's cell; disjointness makes
    the rule consistent: a point inside some ball B is assigned to B, since
    its ratio there is at most 1 and exceeds 1 at every other ball.

    Returns one child atom per ball, in order; a ball reaching no point
    yields an empty child.  A member outside every 5-dilate violates the
    coverage precondition and raises.
    """
    if not balls:
        raise ValueError("need at least one ball")
    for ball in balls:
        if not isinstance(ball, Ball):
            raise TypeError(f"expected Ball, got {type(ball).__name__}")
        if ball.dim != mu.dim:
            raise ValueError("ball dimension does not match the measure")
    for i, a in enumerate(balls):
        for b in balls[i + 1 :]:
            gap = math.dist(a.center.coords, b.center.coords) - a.radius - b.radius
            if gap <= 0:
                raise ValueError("balls must be pairwise disjoint")
    centers = np.array([b.center.coords for b in balls], dtype=np.float64)
    radii = np.array([b.radius for b in balls], dtype=np.float64)
    pts = mu.points[parent.members]
    labels = _kernels.ratio_min_assign(pts, centers, radii, 5.0)
    if (labels < 0).any():
        missing = int(parent.members[int(np.argmin(labels))])
        raise ValueError(
            f"support point {missing} lies outside every 5-dilated ball; "
            "the balls do not cover the parent cell"
        )
    level = parent.level + 1 if child_level is None else int(child_level)
    out = []
    for i, ball in enumerate(balls):
        out.append(
            Atom(
                id=i,
                level=level,
                ball=ball,
                members=parent.members[labels == i],
                parent=parent.id,
            )
        )
    return out


# ---------------------------------------------------------------------------
# filtration


@dataclass(eq=False)
class Filtration:
    """One nested partition tree: levels keyed by dyadic generation."""

    system_index: int
    family_index: int
    params: LatticeParams
    levels: dict
    root_id: int
    c_tilde0: float

    def __post_init__(self) -> None:
        self._by_id = {a.id: a for atoms in self.levels.values() for a in atoms}
        self._by_tag = {
            a.preseed_tag: a.id
            for atoms in self.levels.values()
            for a in atoms
            if a.preseed_tag is not None
        }

    @property
    def gens(self) -> tuple[int, ...]:
        return tuple(sorted(self.levels))

    @property
    def n_atoms(self) -> int:
        return len(self._by_id)

    def atom(self, atom_id: int) -> Atom:
        return self._by_id[atom_id]

    def root(self) -> Atom:
        return self._by_id[self.root_id]

    def level_atoms(self, gen: int) -> tuple[Atom, ...]:
        return self.levels[gen]

    def atom_for_tag(self, tag: tuple) -> Atom | None:
        aid = self._by_tag.get(tag)
        return None if aid is None else self._by_id[aid]

    def parent(self, atom: Atom) -> Atom:
        if atom.parent is None:
            raise LookupError("the root atom has no parent")
        return self._by_id[atom.parent]

    def ancestor(self, atom: Atom, up: int) -> Atom:
        """The atom ``up`` levels above; up=0 is the atom itself."""
        if up < 0:
            raise ValueError("up must be nonnegative")
        for _ in range(up):
            atom = self.parent(atom)
        return atom

    def point_labels(self, gen: int) -> np.ndarray:
        """Per support point, the row of its atom in ``level_atoms(gen)``."""
        atoms = self.levels[gen]
        n = sum(len(a) for a in atoms)
        labels = np.full(n, -1, dtype=np.int64)
        for row, a in enumerate(atoms):
            labels[a.members] = row
        return labels


# ---------------------------------------------------------------------------
# build context: caches shared by every filtration of one run


class _UniTable:
    """Supp-meeting doubling cubes of one (system, generation): positions,
    per-point cube row, masses, centers, packed position classes."""

    __slots__ = ("pos", "inverse", "masses", "centers", "classes", "doubling")

    def __init__(self, mu: PointMeasure, system: DyadicSystem, k: int, params: LatticeParams):
        d = mu.dim
        e = _eps(k)
        cols = np.empty((len(mu), d), dtype=np.int64)
        for i in range(d):
            cols[:, i] = np.floor(
                np.ldexp(mu.points[:, i], k) - e * system.sigma[i] / 3.0
            ).astype(np.int64)
        self.pos, self.inverse = np.unique(cols, axis=0, return_inverse=True)
        self.inverse = self.inverse.ravel()
        u = self.pos.shape[0]
        self.masses = np.bincount(self.inverse, weights=mu.weights, minlength=u)
        side = math.ldexp(1.0, -k)
        lo = np.empty((u, d), dtype=np.float64)
        for i in range(d):
            lo[:, i] = np.ldexp((3.0 * self.pos[:, i] + e * system.sigma[i]) / 3.0, -k)
        self.centers = lo + 0.5 * side
        m = params.m_colors
        cls = np.zeros(u, dtype=np.int64)
        for i in range(d):
            cls = cls * m + self.pos[:, i] % m
        self.classes = cls
        # doubling cascade: beta*mass(Q) >= total certifies; the rest get the
        # exact dilated-cube mass
        total = mu.total_mass
        ok = params.c0 * self.masses >= total
        if not ok.all():
            for row in np.nonzero(~ok)[0]:
                cube = system.cube_at(k, tuple(int(p) for p in self.pos[row]))
                small = mass(mu, cube)
                big = mass(mu, Cube(cube.center, side * params.preseed_alpha))
                ok[row] = big <= params.c0 * small
        self.doubling = ok


class _BuildContext:
    def __init__(self, mu: PointMeasure, params: LatticeParams):
        self.mu = mu
        self.params = params
        self.systems = SystemFamily.for_dim(mu.dim)
        self._uni: dict = {}
        self._cand: dict = {}
        self._pbk: dict = {}
        d = mu.dim
        rd = math.sqrt(d)
        b = params.b
        ext = mu.extent
        scale = ext if ext > 0.0 else 1.0
        # coarsest k with s_k >= extent: log2 guess, then exact adjust
        k = math.floor(math.log2(rd / (2.0 * scale)))
        while rd * math.ldexp(1.0, -(k + 1) - 1) >= scale:
            k += 1
        while rd * math.ldexp(1.0, -k - 1) < scale:
            k -= 1
        self.k_coarse = k
        d_min = mu.min_separation
        if math.isinf(d_min):
            self.k_fine = self.k_coarse
        else:
            # finest needed k: 10 * s_k < d_min
            k = math.ceil(math.log2(10.0 * rd / (2.0 * d_min)))
            while 10.0 * rd * math.ldexp(1.0, -(k - 1) - 1) < d_min:
                k -= 1
            while 10.0 * rd * math.ldexp(1.0, -k - 1) >= d_min:
                k += 1
            self.k_fine = max(k, self.k_coarse)
        max_abs = float(np.max(np.abs(mu.points))) if len(mu) else 0.0
        if math.ldexp(max_abs + 1.0, self.k_fine + b) >= 2.0**62:
            raise ValueError(
                "support coordinates too large for the finest generation "
                f"{self.k_fine}; rescale the measure"
            )

    def k_root(self, rho: int) -> int:
        b = self.params.b
        return self.k_coarse - ((self.k_coarse - rho) % b)

    def k_bot(self, rho: int) -> int:
        if math.isinf(self.mu.min_separation):
            # one atom: no fineness requirement, a single level suffices
            return self.k_root(rho)
        b = self.params.b
        k = self.k_fine + ((rho - self.k_fine) % b)
        return max(k, self.k_root(rho))

    def s(self, k: int) -> float:
        return math.sqrt(self.mu.dim) * math.ldexp(1.0, -k - 1)

    def universe(self, sys_idx: int, k: int) -> _UniTable:
        key = (sys_idx, k)
        tab = self._uni.get(key)
        if tab is None:
            tab = _UniTable(self.mu, self.systems.system(sys_idx), k, self.params)
            self._uni[key] = tab
        return tab

    def candidates(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Largest-doubling radii for every support point at generation k,
        over a geometric grid anchored at s_k (so the vacuous regime selects
        exactly s_k everywhere)."""
        hit = self._cand.get(k)
        if hit is None:
            s_k = self.s(k)
            r_min = s_k / self.params.c0
            grid = []
            j = 0
            while True:
                r = s_k * self.params.grid_ratio ** (-j)
                if r < r_min:
                    break
                grid.append(r)
                j += 1
            hit = largest_doubling_radii(
                self.mu,
                self.params.alpha,
                self.params.c0,
                r_min,
                s_k,
                radius_grid=grid,
            )
            if (hit[0] > s_k).any():
                raise LatticeBuildError(f"candidate radius exceeds the ceiling s_{k}")
            self._cand[k] = hit
        return hit

    def point_buckets(self, k: int):
        """Support points bucketed at cell size s_k; every ball of a
        generation-k level fits one cell, so containment queries against any
        filtration's selection can share this index."""
        hit = self._pbk.get(k)
        if hit is None:
            hit = _kernels.build_bucket_index(self.mu.points, self.s(k))
            self._pbk[k] = hit
        return hit


class _LevelData:
    __slots__ = (
        "gen",
        "centers",
        "radii",
        "tag_pos",
        "is_preseed",
        "point_label",
        "starts",
        "members",
        "child_to_parent",
        "n_fallback",
    )

    def __init__(self, gen, centers, radii, tag_pos, is_preseed, point_label, starts, members, child_to_parent, n_fallback):
        self.gen = gen
        self.centers = centers
        self.radii = radii
        self.tag_pos = tag_pos
        self.is_preseed = is_preseed
        self.point_label = point_label
        self.starts = starts
        self.members = members
        self.child_to_parent = child_to_parent
        self.n_fallback = n_fallback


def _bottom_fast_path(ctx, uni, rows, cand_idx, cand_radii, cand_flags, s_k):
    """Forced bottom selection when 10 s_k < d_min and every candidate holds
    the ceiling radius: two support points can never come within blocking
    distance (a blocked pair would sit within 3.625 s_k), every pre-seed cube
    holds exactly one point, and the ratio rule gives each point its own
    ball.  Returns None when a guard fails; the caller then runs the general
    kernels, which produce the identical result whenever this path applies.
    """
    if not (cand_flags.all() and (cand_radii == s_k).all()):
        return None
    mu = ctx.mu
    n_pre = int(rows.size)
    occupancy = np.bincount(uni.inverse, minlength=uni.pos.shape[0])[rows]
    if (occupancy != 1).any():
        return None
    sel_centers = np.concatenate([uni.centers[rows], mu.points[cand_idx]], axis=0)
    sel_radii = np.full(n_pre + cand_idx.size, s_k, dtype=np.float64)
    is_preseed = np.zeros(n_pre + cand_idx.size, dtype=bool)
    is_preseed[:n_pre] = True
    tag_pos = np.zeros((n_pre + cand_idx.size, mu.dim), dtype=np.int64)
    tag_pos[:n_pre] = uni.pos[rows]
    slot_of_row = np.full(uni.pos.shape[0], -1, dtype=np.int64)
    slot_of_row[rows] = np.arange(n_pre, dtype=np.int64)
    point_label = slot_of_row[uni.inverse]
    point_label[cand_idx] = n_pre + np.arange(cand_idx.size, dtype=np.int64)
    return sel_centers, sel_radii, is_preseed, tag_pos, point_label


def _build_one_level(ctx: _BuildContext, sys_idx: int, k: int, cls: int, prev: _LevelData | None) -> _LevelData:
    mu = ctx.mu
    params = ctx.params
    pts = mu.points
    s_k = ctx.s(k)
    uni = ctx.universe(sys_idx, k)
    # the pre-seed universe: supp-meeting cubes of this class that pass the
    # doubling filter (in the vacuous regime the filter admits everything)
    row_mask = (uni.classes == cls) & uni.doubling
    rows = np.nonzero(row_mask)[0]
    n_pre = int(rows.size)
    pre_centers = uni.centers[rows]
    pre_radii = np.full(n_pre, s_k, dtype=np.float64)

    # candidate seeding keys off cube membership, not ball membership; extra
    # candidates inside a pre-seed ball but outside its cube are always
    # blocked by that seed, so the selection is unchanged
    covered = row_mask[uni.inverse]
    cand_idx = np.nonzero(~covered)[0]
    cand_radii, cand_flags = ctx.candidates(k)

    fast = None
    if prev is None and math.isfinite(mu.min_separation) and 10.0 * s_k < mu.min_separation:
        fast = _bottom_fast_path(ctx, uni, rows, cand_idx, cand_radii, cand_flags, s_k)
    if fast is not None:
        sel_centers, sel_radii, is_preseed, tag_pos, point_label = fast
        n_fallback = 0
        child_to_parent = None
    else:
        if cand_idx.size:
            order = np.lexsort((cand_idx, -cand_radii[cand_idx]))
            cand_idx = cand_idx[order]
        centers = np.concatenate([pre_centers, pts[cand_idx]], axis=0)
        radii = np.concatenate([pre_radii, cand_radii[cand_idx]])
        margin = 10.0 * s_k / params.a0
        accepted, conflict = _kernels.greedy_margin_select(centers, radii, n_pre, margin)
        if conflict >= 0:
            raise LatticeBuildError(
                f"pre-seeded balls at generation {k} violate the separation margin"
            )
        sel = np.nonzero(accepted)[0]
        sel_centers = np.ascontiguousarray(centers[sel])
        sel_radii = radii[sel]
        is_preseed = sel < n_pre
        tag_pos = np.zeros((sel.size, mu.dim), dtype=np.int64)
        tag_pos[is_preseed] = uni.pos[rows[sel[is_preseed]]]
        n_fallback = int((~cand_flags[cand_idx[sel[~is_preseed] - n_pre]]).sum())
        point_label = None
        child_to_parent = None

    if point_label is None and prev is None:
        point_label = _kernels.ratio_min_assign(pts, sel_centers, sel_radii, 5.0)
        if (point_label < 0).any():
            raise LatticeBuildError(
                f"a support point lies outside every 5-dilated ball at "
                f"generation {k}; raise c0_cap to restore the vacuous regime"
            )
    elif point_label is None:
        order, cell_keys, cstarts, mins, h_eff = ctx.point_buckets(k)
        point_ball = _kernels.containing_ball_grouped(
            pts, order, cell_keys, cstarts, mins, h_eff, sel_centers, sel_radii, 0.0
        )
        forced, conflict = _kernels.forced_child_targets(prev.starts, prev.members, point_ball)
        if conflict >= 0:
            raise LatticeBuildError(
                f"margin breach at generation {k}: one child cell meets two "
                "selected balls"
            )
        need = (forced < 0).astype(np.uint8)
        if need.any():
            free = _kernels.free_child_targets(
                prev.centers, need, prev.starts, prev.members, pts, sel_centers, sel_radii, 5.0
            )
            forced = np.where(forced >= 0, forced, free)
            if (forced < 0).any():
                raise LatticeBuildError(
                    f"a child cell at generation {k} fits inside no 5-dilated "
                    "ball; raise c0_cap to restore the vacuous regime"
                )
        child_to_parent = forced
        point_label = child_to_parent[prev.point_label]
        mism = (point_ball >= 0) & (point_label != point_ball)
        if mism.any():
            raise LatticeBuildError(
                f"cell containment breach at generation {k}: a point inside a "
                "selected ball was grouped elsewhere"
            )

    n_sel = sel_centers.shape[0]
    counts = np.bincount(point_label, minlength=n_sel)
    if (counts == 0).any():
        raise LatticeBuildError(
            f"a selected ball at generation {k} received no members"
        )
    members = np.argsort(point_label, kind="stable").astype(np.int64)
    starts = np.zeros(n_sel + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])

    worst = _kernels.group_max_center_dist(starts, members, pts, sel_centers)
    if (worst > 5.0 * sel_radii).any():
        raise LatticeBuildError(
            f"sandwich breach at generation {k}: a cell escapes its ball's 5-dilate"
        )
    return _LevelData(
        k, sel_centers, sel_radii, tag_pos, is_preseed, point_label, starts, members, child_to_parent, n_fallback
    )


def _build_levels(ctx: _BuildContext, sys_idx: int, j: int) -> list[_LevelData]:
    """Fine-to-coarse level stack for family j of one system; extends past
    k_root when the top level is not yet a single atom."""
    params = ctx.params
    rho, cls = _class_of_ordinal(j, params.b, params.m_colors, ctx.mu.dim)
    k_root = ctx.k_root(rho)
    k = ctx.k_bot(rho)
    levels: list[_LevelData] = []
    prev = None
    guard = 0
    while True:
        lev = _build_one_level(ctx, sys_idx, k, cls, prev)
        levels.append(lev)
        if k <= k_root and lev.radii.size == 1:
            break
        guard += 1
        if guard > 90:
            raise LatticeBuildError(
                "no single root after 90 coarsening steps; raise c0_cap"
            )
        prev = lev
        k -= params.b
    if not math.isinf(ctx.mu.min_separation) and (np.diff(levels[0].starts) != 1).any():
        raise LatticeBuildError("bottom level contains a non-singleton cell")
    return levels


def _sigma_of(ctx: _BuildContext, sys_idx: int) -> tuple[int, ...]:
    return ctx.systems.system(sys_idx).sigma


def _assemble_filtration(ctx: _BuildContext, sys_idx: int, j: int, levels: list[_LevelData]) -> Filtration:
    sigma = _sigma_of(ctx, sys_idx)
    offsets = []
    total = 0
    for lev in levels:
        offsets.append(total)
        total += lev.radii.size
    atom_levels: dict = {}
    for li, lev in enumerate(levels):
        atoms = []
        for row in range(lev.radii.size):
            if li + 1 < len(levels):
                parent_id = offsets[li + 1] + int(levels[li + 1].child_to_parent[row])
            else:
                parent_id = None
            tag = None
            if lev.is_preseed[row]:
                tag = (sigma, lev.gen, tuple(int(p) for p in lev.tag_pos[row]))
            atoms.append(
                Atom(
                    id=offsets[li] + row,
                    level=lev.gen,
                    ball=Ball(Point(tuple(lev.centers[row])), float(lev.radii[row])),
                    members=lev.members[lev.starts[row] : lev.starts[row + 1]],
                    parent=parent_id,
                    preseed_tag=tag,
                )
            )
        atom_levels[lev.gen] = tuple(atoms)
    rho, _ = _class_of_ordinal(j, ctx.params.b, ctx.params.m_colors, ctx.mu.dim)
    return Filtration(
        system_index=sys_idx,
        family_index=j,
        params=ctx.params,
        levels=atom_levels,
        root_id=offsets[-1],
        c_tilde0=ctx.s(ctx.k_root(rho)),
    )


def build_filtration(
    mu: PointMeasure,
    params: LatticeParams | None = None,
    *,
    system_index: int = 1,
    family_index: int = 1,
    _ctx: _BuildContext | None = None,
) -> Filtration:
    """Build one filtration: family ``family_index`` of shifted system
    ``system_index``.  Raises LatticeBuildError when a named invariant cannot
    be met (the default parameter policy avoids this for generated measures).
    """
    if params is None:
        params = lattice_params(mu)
    ctx = _ctx if _ctx is not None else _BuildContext(mu, params)
    if not 1 <= system_index <= params.n_systems:
        raise ValueError(f"system_index outside 1..{params.n_systems}")
    if not 1 <= family_index <= params.n_families:
        raise ValueError(f"family_index outside 1..{params.n_families}")
    levels = _build_levels(ctx, system_index, family_index)
    return _assemble_filtration(ctx, system_index, family_index, levels)


# ---------------------------------------------------------------------------
# the full family


class _PreseedTable:
    """Pre-seeded atoms of one filtration, kept columnar so a full-family
    build at 10^4 points stays in memory."""

    __slots__ = ("system_index", "family_index", "sigma", "c_tilde0", "built_gens", "ids", "gens", "centers", "radii", "pos", "parents", "starts", "members", "_row_of")

    def __init__(self, system_index, family_index, sigma, c_tilde0, built_gens, ids, gens, centers, radii, pos, parents, starts, members):
        self.system_index = system_index
        self.family_index = family_index
        self.sigma = sigma
        self.c_tilde0 = c_tilde0
        self.built_gens = built_gens
        self.ids = ids
        self.gens = gens
        self.centers = centers
        self.radii = radii
        self.pos = pos
        self.parents = parents
        self.starts = starts
        self.members = members
        self._row_of = {int(a): r for r, a in enumerate(ids)}

    def atom(self, atom_id: int) -> Atom:
        row = self._row_of[int(atom_id)]
        parent = int(self.parents[row])
        return Atom(
            id=int(self.ids[row]),
            level=int(self.gens[row]),
            ball=Ball(Point(tuple(self.centers[row])), float(self.radii[row])),
            members=self.members[self.starts[row] : self.starts[row + 1]],
            parent=None if parent < 0 else parent,
            preseed_tag=(self.sigma, int(self.gens[row]), tuple(int(p) for p in self.pos[row])),
        )


def _preseed_table_of(ctx: _BuildContext, sys_idx: int, j: int, levels: list[_LevelData]) -> _PreseedTable:
    sigma = _sigma_of(ctx, sys_idx)
    offsets = []
    total = 0
    for lev in levels:
        offsets.append(total)
        total += lev.radii.size
    ids, gens, centers, radii, pos, parents, member_runs = [], [], [], [], [], [], []
    for li, lev in enumerate(levels):
        rows = np.nonzero(lev.is_preseed)[0]
        for row in rows:
            ids.append(offsets[li] + int(row))
            gens.append(lev.gen)
            centers.append(lev.centers[row])
            radii.append(float(lev.radii[row]))
            pos.append(lev.tag_pos[row])
            if li + 1 < len(levels):
                parents.append(offsets[li + 1] + int(levels[li + 1].child_to_parent[row]))
            else:
                parents.append(-1)
            member_runs.append(lev.members[lev.starts[row] : lev.starts[row + 1]])
    p = len(ids)
    d = ctx.mu.dim
    starts = np.zeros(p + 1, dtype=np.int64)
    for r, run in enumerate(member_runs):
        starts[r + 1] = starts[r] + run.size
    members = (
        np.concatenate(member_runs).astype(np.int32)
        if member_runs
        else np.empty(0, dtype=np.int32)
    )
    rho, _ = _class_of_ordinal(j, ctx.params.b, ctx.params.m_colors, d)
    return _PreseedTable(
        sys_idx,
        j,
        sigma,
        ctx.s(ctx.k_root(rho)),
        tuple(lev.gen for lev in levels),
        np.array(ids, dtype=np.int64),
        np.array(gens, dtype=np.int64),
        np.array(centers, dtype=np.float64).reshape(p, d),
        np.array(radii, dtype=np.float64),
        np.array(pos, dtype=np.int64).reshape(p, d),
        np.array(parents, dtype=np.int64),
        starts,
        members,
    )


@dataclass(eq=False)
class BuildReport:
    """Per-run regime flags plus per-filtration build statistics."""

    params: dict
    retain: str
    wall_time: float
    rows: list

    @property
    def n_filtrations(self) -> int:
        return len(self.rows)

    def totals(self) -> dict:
        return {
            "n_filtrations": len(self.rows),
            "atoms": sum(r["n_atoms"] for r in self.rows),
            "preseed_atoms": sum(r["n_preseed_atoms"] for r in self.rows),
            "fallback_candidates": sum(r["n_fallback"] for r in self.rows),
            "wall_time": self.wall_time,
        }

    def as_dict(self) -> dict:
        return {
            "params": self.params,
            "retain": self.retain,
            "totals": self.totals(),
            "rows": self.rows,
        }


def _stats_row(sys_idx: int, j: int, levels: list[_LevelData]) -> dict:
    return {
        "system_index": sys_idx,
        "family_index": j,
        "k_root": levels[-1].gen,
        "k_bot": levels[0].gen,
        "n_levels": len(levels),
        "n_atoms": int(sum(lev.radii.size for lev in levels)),
        "n_preseed_atoms": int(sum(int(lev.is_preseed.sum()) for lev in levels)),
        "n_fallback": int(sum(lev.n_fallback for lev in levels)),
        "atoms_per_level": [int(lev.radii.size) for lev in levels],
    }


@dataclass(eq=False)
class FiltrationFamily:
    """All N filtrations over one measure plus the cube-to-atom index.

    ``retain='full'`` keeps every filtration object (small runs);
    ``retain='preseeds'`` keeps only pre-seeded atoms in columnar tables,
    which is all that lookup needs.  The lookup index maps a dyadic cube key
    to (filtration ordinal, atom id).
    """

    measure: PointMeasure
    params: LatticeParams
    retain: str
    filtrations: tuple | None
    tables: tuple
    lookup: dict
    report: BuildReport

    @property
    def n(self) -> int:
        return self.params.n_filtrations

    def ordinal(self, system_index: int, family_index: int) -> int:
        return (system_index - 1) * self.params.n_families + (family_index - 1)

    def filtration(self, fidx: int) -> Filtration:
        if self.filtrations is None:
            raise LookupError("filtration objects need retain='full'")
        return self.filtrations[fidx]

    def atom_at(self, fidx: int, atom_id: int) -> Atom:
        if self.filtrations is not None:
            return self.filtrations[fidx].atom(atom_id)
        return self.tables[fidx].atom(atom_id)

    def built_gens(self, fidx: int) -> tuple[int, ...]:
        """Generations this filtration actually built (fine to coarse order
        is not guaranteed; use min/max for range checks)."""
        return self.tables[fidx].built_gens


def _iter_family_indices(params: LatticeParams) -> Iterator[tuple[int, int]]:
    for sys_idx in range(1, params.n_systems + 1):
        for j in range(1, params.n_families + 1):
            yield sys_idx, j


_WORKER: dict = {}


def _worker_init(points, weights, dim, growth_exp, params):
    mu = PointMeasure(dim, growth_exp, points, weights)
    _WORKER["ctx"] = _BuildContext(mu, params)


def _worker_build(task):
    sys_idx, j = task
    ctx = _WORKER["ctx"]
    levels = _build_levels(ctx, sys_idx, j)
    table = _preseed_table_of(ctx, sys_idx, j, levels)
    return sys_idx, j, table, _stats_row(sys_idx, j, levels)


def build_family(
    mu: PointMeasure,
    params: LatticeParams | None = None,
    *,
    retain: str = "preseeds",
    workers: int = 1,
) -> FiltrationFamily:
    """Build all N = 3^d * b * M^d filtrations.

    ``workers > 1`` builds filtrations in a process pool (results are merged
    in a fixed order, so output is identical to the sequential build); it
    requires ``retain='preseeds'``.
    """
    if retain not in ("full", "preseeds"):
        raise ValueError(f"retain must be 'full' or 'preseeds', got {retain!r}")
    if params is None:
        params = lattice_params(mu)
    if workers > 1 and retain != "preseeds":
        raise ValueError("workers > 1 requires retain='preseeds'")
    t0 = time.perf_counter()
    tasks = list(_iter_family_indices(params))
    tables: list = [None] * len(tasks)
    rows: list = [None] * len(tasks)
    filtrations: list | None = [] if retain == "full" else None

    if workers > 1:
        with ProcessPoolExecutor(
            max_workers=workers,
            initializer=_worker_init,
            initargs=(mu.points, mu.weights, mu.dim, mu.growth_exp, params),
        ) as pool:
            chunk = max(1, len(tasks) // (workers * 8))
            for sys_idx, j, table, row in pool.map(_worker_build, tasks, chunksize=chunk):
                fidx = (sys_idx - 1) * params.n_families + (j - 1)
                tables[fidx] = table
                rows[fidx] = row
    else:
        ctx = _BuildContext(mu, params)
        for fidx, (sys_idx, j) in enumerate(tasks):
            levels = _build_levels(ctx, sys_idx, j)
            tables[fidx] = _preseed_table_of(ctx, sys_idx, j, levels)
            rows[fidx] = _stats_row(sys_idx, j, levels)
            if filtrations is not None:
                filtrations.append(_assemble_filtration(ctx, sys_idx, j, levels))

    lookup: dict = {}
    for fidx, table in enumerate(tables):
        for row in range(table.ids.shape[0]):
            tag = (table.sigma, int(table.gens[row]), tuple(int(p) for p in table.pos[row]))
            lookup[tag] = (fidx, int(table.ids[row]))
    report = BuildReport(
        params=params.as_dict(),
        retain=retain,
        wall_time=time.perf_counter() - t0,
        rows=rows,
    )
    return FiltrationFamily(
        measure=mu,
        params=params,
        retain=retain,
        filtrations=tuple(filtrations) if filtrations is not None else None,
        tables=tuple(tables),
        lookup=lookup,
        report=report,
    )


# ---------------------------------------------------------------------------
# lookup and verification


def lookup_cube(family: FiltrationFamily, q: Cube, mu: PointMeasure | None = None) -> tuple[int, Atom]:
    """Resolve a doubling cube to the atom realizing its dyadic sandwich.

    Guarantees for the returned atom T: Q cap supp subset of T,
    mu(Q) <= mu(T) <= c0 * mu(Q), and r(B_T)/side(Q) in
    [sqrt(d)/2, 3 sqrt(d)].  The input must be (alpha0, c0)-doubling and
    carry mass, and its dyadic sandwich cube must fall inside the built
    scale range; out-of-range generations raise LookupError (a finite-data
    truncation, not a defect of the index).
    """
    mu = family.measure if mu is None else mu
    params = family.params
    if not isinstance(q, Cube):
        raise TypeError(f"expected Cube, got {type(q).__name__}")
    if not mass(mu, q) > 0.0:
        raise ValueError("cube carries no mass; lookup needs a mass-carrying cube")
    if not is_doubling(mu, q, params.alpha0, params.c0):
        raise ValueError(
            f"cube is not ({params.alpha0:g}, {params.c0:g})-doubling; "
            "lookup guarantees hold only for doubling cubes"
        )
    sys_idx, qp = cover_cube(SystemFamily.for_dim(mu.dim), q)
    j = _family_ordinal(qp.k, qp.pos, params.b, params.m_colors)
    fidx = family.ordinal(sys_idx, j)
    hit = family.lookup.get(qp.key())
    if hit is None:
        gens = family.built_gens(fidx)
        if qp.k < min(gens):
            raise LookupError(
                f"containing dyadic cube (generation {qp.k}) is coarser than "
                f"the coarsest built level ({min(gens)}): the query exceeds "
                "the lattice's scale range"
            )
        if qp.k > max(gens):
            raise LookupError(
                f"containing dyadic cube (generation {qp.k}) is finer than "
                f"the finest built level ({max(gens)}): the query exceeds "
                "the lattice's scale range"
            )
        raise LookupError(
            f"containing dyadic cube (generation {qp.k}) fell out of the "
            "pre-seed doubling filter; raise c0_cap so the build runs in the "
            "vacuous regime"
        )
    fidx, atom_id = hit
    return fidx, family.atom_at(fidx, atom_id)


@dataclass(eq=False)
class TheoremAReport:
    """Outcome of sandwich/mass/radius checks over a batch of test cubes."""

    n_queried: int
    n_skipped_nondoubling: int
    n_skipped_out_of_range: int
    n_inclusion_ok: int
    n_mass_ok: int
    n_radius_ok: int
    r_ratio_range: tuple
    mass_ratio_range: tuple
    rows: list

    @property
    def passed(self) -> bool:
        n = self.n_queried
        return (
            self.n_inclusion_ok == n and self.n_mass_ok == n and self.n_radius_ok == n
        )

    def as_dict(self) -> dict:
        return {
            "n_queried": self.n_queried,
            "n_skipped_nondoubling": self.n_skipped_nondoubling,
            "n_skipped_out_of_range": self.n_skipped_out_of_range,
            "n_inclusion_ok": self.n_inclusion_ok,
            "n_mass_ok": self.n_mass_ok,
            "n_radius_ok": self.n_radius_ok,
            "r_ratio_range": list(self.r_ratio_range),
            "mass_ratio_range": list(self.mass_ratio_range),
            "passed": self.passed,
        }


def verify_theorem_a(
    family: FiltrationFamily,
    test_cubes: Sequence[Cube],
    mu: PointMeasure | None = None,
    *,
    radius_tol: float = 1e-9,
) -> TheoremAReport:
    """Run every test cube through lookup and check the three guarantees.

    Non-doubling cubes are recorded as skipped, not failed.  The radius
    window [sqrt(d)/2, 3 sqrt(d)] is checked with ``radius_tol`` slack; the
    inclusion and mass-ratio checks are exact (masses via fsum)."""
    mu = family.measure if mu is None else mu
    d = mu.dim
    rd = math.sqrt(d)
    c0 = family.params.c0
    rows = []
    n_skip = n_range = n_inc = n_mass = n_rad = 0
    r_ratios = []
    m_ratios = []
    for q in test_cubes:
        try:
            fidx, atom = lookup_cube(family, q, mu)
        except ValueError:
            n_skip += 1
            rows.append({"skipped": True, "reason": "not doubling"})
            continue
        except LookupError:
            n_range += 1
            rows.append({"skipped": True, "reason": "out of scale range"})
            continue
        inside = np.nonzero(
            np.all(mu.points >= q.lo, axis=1) & np.all(mu.points < q.hi, axis=1)
        )[0]
        inclusion = bool(np.isin(inside, atom.members).all())
        mass_q = mass(mu, q)
        mass_t = atom.mass(mu)
        m_ratio = mass_t / mass_q
        mass_ok = bool(mass_q <= mass_t <= c0 * mass_q)
        r_ratio = atom.ball.radius / q.side
        rad_ok = bool(rd / 2.0 - radius_tol <= r_ratio <= 3.0 * rd + radius_tol)
        n_inc += inclusion
        n_mass += mass_ok
        n_rad += rad_ok
        r_ratios.append(r_ratio)
        m_ratios.append(m_ratio)
        rows.append(
            {
                "skipped": False,
                "fidx": fidx,
                "atom_id": atom.id,
                "inclusion": inclusion,
                "mass_ratio": m_ratio,
                "mass_ok": mass_ok,
                "r_ratio": r_ratio,
                "radius_ok": rad_ok,
            }
        )
    n_q = len(test_cubes) - n_skip - n_range
    return TheoremAReport(
        n_queried=n_q,
        n_skipped_nondoubling=n_skip,
        n_skipped_out_of_range=n_range,
        n_inclusion_ok=n_inc,
        n_mass_ok=n_mass,
        n_radius_ok=n_rad,
        r_ratio_range=(min(r_ratios), max(r_ratios)) if r_ratios else (math.nan, math.nan),
        mass_ratio_range=(min(m_ratios), max(m_ratios)) if m_ratios else (math.nan, math.nan),
        rows=rows,
    )


def small_boundary_report(
    filt: Filtration,
    mu: PointMeasure,
    ls: Sequence[int] = (0, 1, 2),
) -> dict:
    """Measure (never assert) the boundary-collar decay of each level.

    For level ordinal t (root t=0) and offset l, the collar of an atom is
    the set of support points strictly within C~0 * a0^-(t+l) of the cell
    boundary, counted on both sides; its mass is reported relative to
    mu(90 B).  Needs a fully retained filtration.
    """
    a0 = filt.params.a0
    gens = filt.gens
    k_root = gens[0]
    out = {}
    for gen in gens:
        atoms = filt.level_atoms(gen)
        labels = filt.point_labels(gen)
        t = (gen - k_root) // filt.params.b
        taus = np.array([filt.c_tilde0 * float(a0) ** -(t + l) for l in ls])
        int_m, ext_m, ok = _kernels.boundary_zone_masses(
            mu.points, mu.weights, labels, len(atoms), taus
        )
        if not ok:
            # dense fallback: a point saw too many labels in its collar
            int_m = np.zeros((len(taus), len(atoms)))
            ext_m = np.zeros_like(int_m)
            for li, tau in enumerate(taus):
                for row, a in enumerate(atoms):
                    sel = np.zeros(len(mu), dtype=bool)
                    sel[a.members] = True
                    dists = np.sqrt(
                        ((mu.points[sel][:, None, :] - mu.points[~sel][None, :, :]) ** 2).sum(-1)
                    )
                    if dists.size:
                        int_m[li, row] = mu.weights[sel][dists.min(axis=1) < tau].sum()
                        ext_m[li, row] = mu.weights[~sel][dists.min(axis=0) < tau].sum()
        ball90 = np.empty(len(atoms))
        for row, a in enumerate(atoms):
            ball90[row] = mass(mu, Ball(a.ball.center, 90.0 * a.ball.radius))
        collar = int_m + ext_m
        with np.errstate(invalid="ignore"):
            ratios = collar / ball90[None, :]
        out[gen] = {
            "offsets": list(ls),
            "collar_mass": collar,
            "ball90_mass": ball90,
            "ratios": ratios,
            "max_ratio_per_offset": [float(np.nanmax(r)) if r.size else math.nan for r in ratios],
        }
    return out


# ---------------------------------------------------------------------------
# serialization


def _atom_payload(atom: Atom) -> dict:
    tag = None
    if atom.preseed_tag is not None:
        sigma, k, pos = atom.preseed_tag
        tag = [list(sigma), k, list(pos)]
    return {
        "id": atom.id,
        "level": atom.level,
        "ball": {
            "center": [float(c) for c in atom.ball.center.coords],
            "radius": atom.ball.radius,
        },
        "members": [int(i) for i in atom.members],
        "parent": atom.parent,
        "preseed_tag": tag,
    }


def _atom_from_payload(pay: dict) -> Atom:
    tag = pay["preseed_tag"]
    if tag is not None:
        tag = (tuple(tag[0]), int(tag[1]), tuple(tag[2]))
    return Atom(
        id=int(pay["id"]),
        level=int(pay["level"]),
        ball=Ball(Point(tuple(pay["ball"]["center"])), float(pay["ball"]["radius"])),
        members=np.array(pay["members"], dtype=np.int64),
        parent=None if pay["parent"] is None else int(pay["parent"]),
        preseed_tag=tag,
    )


def save_family(family: FiltrationFamily, path) -> None:
    """Write the family as JSON.  Full retention stores every atom; preseed
    retention stores only pre-seeded atoms (lookup stays total either way)."""
    filt_payloads = []
    if family.filtrations is not None:
        for f in family.filtrations:
            filt_payloads.append(
                {
                    "system_index": f.system_index,
                    "family_index": f.family_index,
                    "c_tilde0": f.c_tilde0,
                    "built_gens": list(f.gens),
                    "root_id": f.root_id,
                    "levels": {
                        str(gen): [_atom_payload(a) for a in atoms]
                        for gen, atoms in f.levels.items()
                    },
                }
            )
    else:
        for tab in family.tables:
            atoms = [tab.atom(int(aid)) for aid in tab.ids]
            filt_payloads.append(
                {
                    "system_index": tab.system_index,
                    "family_index": tab.family_index,
                    "c_tilde0": tab.c_tilde0,
                    "built_gens": list(tab.built_gens),
                    "root_id": None,
                    "preseed_atoms": [_atom_payload(a) for a in atoms],
                }
            )
    doc = {
        "format": _FORMAT_NAME,
        "version": 1,
        "level_convention": _LEVEL_CONVENTION,
        "params": family.params.as_dict(),
        "retain": family.retain,
        "measure": {
            "dim": family.measure.dim,
            "n_points": len(family.measure),
            "total_mass": family.measure.total_mass,
        },
        "report": family.report.as_dict(),
        "filtrations": filt_payloads,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def load_family(path, mu: PointMeasure) -> FiltrationFamily:
    """Rebuild a family from ``save_family`` output over the same measure."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != _FORMAT_NAME:
        raise ValueError(f"not a {_FORMAT_NAME} file")
    meas = doc["measure"]
    if meas["dim"] != mu.dim or meas["n_points"] != len(mu):
        raise ValueError("measure does not match the one the family was built on")
    p = doc["params"]
    params = LatticeParams(
        dim=p["dim"],
        alpha=p["alpha"],
        c0=p["c0"],
        a0=p["a0"],
        grid_ratio=p["grid_ratio"],
        relaxed_c0=p["relaxed_c0"],
        vacuous=p["vacuous"],
        a0_paper_rule=p["a0_paper_rule"],
        alpha_paper_faithful=p["alpha_paper_faithful"],
    )
    retain = doc["retain"]
    filtrations = []
    tables = []
    lookup: dict = {}
    for fidx, pay in enumerate(doc["filtrations"]):
        sys_idx = pay["system_index"]
        j = pay["family_index"]
        if retain == "full":
            levels = {
                int(gen): tuple(_atom_from_payload(a) for a in atoms)
                for gen, atoms in pay["levels"].items()
            }
            filt = Filtration(
                system_index=sys_idx,
                family_index=j,
                params=params,
                levels=levels,
                root_id=int(pay["root_id"]),
                c_tilde0=float(pay["c_tilde0"]),
            )
            filtrations.append(filt)
            preseeds = [
                a for atoms in levels.values() for a in atoms if a.preseed_tag is not None
            ]
        else:
            preseeds = [_atom_from_payload(a) for a in pay["preseed_atoms"]]
            d = params.dim
            n_p = len(preseeds)
            starts = np.zeros(n_p + 1, dtype=np.int64)
            for r, a in enumerate(preseeds):
                starts[r + 1] = starts[r] + len(a)
            tables.append(
                _PreseedTable(
                    sys_idx,
                    j,
                    tuple(preseeds[0].preseed_tag[0]) if preseeds else SystemFamily.for_dim(d).system(sys_idx).sigma,
                    float(pay["c_tilde0"]),
                    tuple(pay["built_gens"]),
                    np.array([a.id for a in preseeds], dtype=np.int64),
                    np.array([a.level for a in preseeds], dtype=np.int64),
                    np.array([a.ball.center.coords for a in preseeds], dtype=np.float64).reshape(n_p, d),
                    np.array([a.ball.radius for a in preseeds], dtype=np.float64),
                    np.array([a.preseed_tag[2] for a in preseeds], dtype=np.int64).reshape(n_p, d),
                    np.array([-1 if a.parent is None else a.parent for a in preseeds], dtype=np.int64),
                    starts,
                    np.concatenate([a.members for a in preseeds]).astype(np.int32)
                    if preseeds
                    else np.empty(0, dtype=np.int32),
                )
            )
        for a in preseeds:
            lookup[a.preseed_tag] = (fidx, a.id)
    report = BuildReport(
        params=doc["report"]["params"],
        retain=retain,
        wall_time=doc["report"]["totals"]["wall_time"],
        rows=doc["report"]["rows"],
    )
    if retain == "full":
        # rebuild columnar tables from the filtration objects so atom_at
        # works uniformly
        tables = []
        for f in filtrations:
            runs = [a for atoms in f.levels.values() for a in atoms if a.preseed_tag is not None]
            n_p = len(runs)
            d = params.dim
            starts = np.zeros(n_p + 1, dtype=np.int64)
            for r, a in enumerate(runs):
                starts[r + 1] = starts[r] + len(a)
            tables.append(
                _PreseedTable(
                    f.system_index,
                    f.family_index,
                    SystemFamily.for_dim(d).system(f.system_index).sigma,
                    f.c_tilde0,
                    f.gens,
                    np.array([a.id for a in runs], dtype=np.int64),
                    np.array([a.level for a in runs], dtype=np.int64),
                    np.array([a.ball.center.coords for a in runs], dtype=np.float64).reshape(n_p, d),
                    np.array([a.ball.radius for a in runs], dtype=np.float64),
                    np.array([a.preseed_tag[2] for a in runs], dtype=np.int64).reshape(n_p, d),
                    np.array([-1 if a.parent is None else a.parent for a in runs], dtype=np.int64),
                    starts,
                    np.concatenate([a.members for a in runs]).astype(np.int32)
                    if runs
                    else np.empty(0, dtype=np.int32),
                )
            )
    return FiltrationFamily(
        measure=mu,
        params=params,
        retain=retain,
        filtrations=tuple(filtrations) if retain == "full" else None,
        tables=tuple(tables),
        lookup=lookup,
        report=report,
    )
