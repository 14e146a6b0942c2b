"""Geometry, coverings, doubling filtrations, and BMO-type norms for finite
weighted point measures with polynomial growth.

The package is organized bottom-up:

- ``geometry``: axis-aligned cubes/balls, concentric dilation, shifted dyadic grids
- ``measure``: point measures, growth normalization, doubling predicates, generators
- ``onethird``: the 3^d shifted systems and comparable-dyadic-cube lookups
- ``covering``: preseeded 5R greedy covering and largest-doubling-ball search
- ``lattice``: the N = 3^d * N0 doubling filtrations with atom/ancestry/lookup queries
- ``delta``: the proximity functional delta(Q, R) in cube and filtration form
- ``bmo``: the six oscillation norms and the comparison harness
- ``cli``: batch orchestration (generate / build / verify / norms / compare / plot)
"""

from ndbmo.geometry import Ball, Cube, DyadicCube, DyadicSystem, Point, dilate, contains

__all__ = [
    "Ball",
    "Cube",
    "DyadicCube",
    "DyadicSystem",
    "Point",
    "dilate",
    "contains",
]
