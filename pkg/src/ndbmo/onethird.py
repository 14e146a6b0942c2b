"""The 3^d shifted dyadic systems and the covering lookups built on them.

Every axis-parallel cube Q can be sandwiched between a shifted dyadic cube
and its sixfold dilation: some system contains a cube T with Q ⊆ T ⊆ 6Q.
Within one system the containing cubes form a chain, so the minimal
containing cube decides feasibility for that system; any containing cube
with side at most three times ℓ(Q) lands inside 6Q automatically.

For pairs the two-sided sandwich in a *common* system is not always
attainable (the per-cube sets of workable shifts can be disjoint; see the
regression case in the tests).  What is always attainable in a common
system is containment with the side bound ℓ(T_i) ≤ 6 ℓ(Q_i): at the unique
scale with 2^-k in [3ℓ, 6ℓ) an axis of one cube can block at most one of
the three shifts, because two blocking grid lines would have to sit closer
than their spacing allows.  ``cover_pair`` therefore prefers the full
sandwich and falls back to the side-bounded form, flagging which one it
returned.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

from .geometry import (
    Cube,
    DyadicCube,
    DyadicSystem,
    contains,
    dilate,
    smallest_containing_dyadic,
)

__all__ = ["SystemFamily", "PairCover", "ConventionError", "cover_cube", "cover_pair"]


class ConventionError(RuntimeError):
    """The scale scan ran out without a guaranteed cover: the grid
    conventions are internally inconsistent (this is a bug, not bad input)."""


@dataclass(frozen=True)
class SystemFamily:
    """The 3^d shifted systems of one dimension, indexed 1..3^d.

    Index j corresponds to the base-3 digits of j-1, most significant digit
    on the first axis; index 1 is always the unshifted system.
    """

    systems: tuple[DyadicSystem, ...]

    def __post_init__(self) -> None:
        if not self.systems:
            raise ValueError("family must hold at least one system")
        d = self.systems[0].dim
        expected = tuple(
            DyadicSystem(sig) for sig in itertools.product((0, 1, 2), repeat=d)
        )
        if self.systems != expected:
            raise ValueError("systems must enumerate the 3^d shifts in canonical order")

    @classmethod
    def for_dim(cls, dim: int) -> "SystemFamily":
        return cls(tuple(DyadicSystem(sig) for sig in itertools.product((0, 1, 2), repeat=dim)))

    @property
    def dim(self) -> int:
        return self.systems[0].dim

    def __len__(self) -> int:
        return len(self.systems)

    def system(self, index: int) -> DyadicSystem:
        """1-based accessor matching the indices returned by the cover ops."""
        if not 1 <= index <= len(self.systems):
            raise IndexError(f"system index {index} outside 1..{len(self.systems)}")
        return self.systems[index - 1]


@dataclass(frozen=True)
class PairCover:
    """Common-system cover of two cubes.

    ``sandwich`` records whether both cubes got the full form Q ⊆ T ⊆ 6Q;
    when False, the guaranteed weaker form holds: Q_i ⊆ T_i with
    ℓ(T_i) ≤ 6 ℓ(Q_i).
    """

    index: int
    t1: DyadicCube
    t2: DyadicCube
    sandwich: bool


def _minimal_candidate(system: DyadicSystem, q: Cube) -> DyadicCube | None:
    # minimal containing cube with side capped at 6 ell(Q); chain structure
    # makes it the only candidate worth checking in this system
    return smallest_containing_dyadic(system, q, coarsest_side=6.0 * q.side)


def cover_cube(fam: SystemFamily, q: Cube) -> tuple[int, DyadicCube]:
    """Sandwich Q ⊆ T ⊆ 6Q in the lowest-index system that admits one.

    Returns the 1-based system index and the cube.  Ties inside a system are
    impossible: the minimal containing cube is unique.
    """
    if not isinstance(q, Cube):
        raise TypeError("cover_cube expects a Cube; convert dyadic cubes via as_cube()")
    if q.center.dim != fam.dim:
        raise ValueError("cube dimension does not match the family")
    six_q = dilate(q, 6.0)
    for j, system in enumerate(fam.systems, start=1):
        t = _minimal_candidate(system, q)
        if t is not None and contains(six_q, t):
            return j, t
    raise ConventionError(
        f"no system of {len(fam.systems)} admits a sandwich for {q}; "
        "the scale window or corner convention is broken"
    )


def cover_pair(fam: SystemFamily, q1: Cube, q2: Cube) -> PairCover:
    """Cover two cubes inside one common system.

    Scans systems in index order.  The first system giving the full sandwich
    for both cubes wins; if none does, the first system containing both with
    the side bound is returned with ``sandwich=False`` (such a system always
    exists, see the module docstring).
    """
    for q in (q1, q2):
        if not isinstance(q, Cube):
            raise TypeError("cover_pair expects Cubes")
        if q.center.dim != fam.dim:
            raise ValueError("cube dimension does not match the family")
    six_q1 = dilate(q1, 6.0)
    six_q2 = dilate(q2, 6.0)
    fallback: PairCover | None = None
    for j, system in enumerate(fam.systems, start=1):
        t1 = _minimal_candidate(system, q1)
        if t1 is None:
            continue
        t2 = _minimal_candidate(system, q2)
        if t2 is None:
            continue
        if contains(six_q1, t1) and contains(six_q2, t2):
            return PairCover(j, t1, t2, sandwich=True)
        if fallback is None:
            fallback = PairCover(j, t1, t2, sandwich=False)
    if fallback is not None:
        return fallback
    raise ConventionError(
        "no common system contains both cubes within the side bound; "
        "the scale window or corner convention is broken"
    )
