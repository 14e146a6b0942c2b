"""Measure tests: brute-force oracles for the grid kernels, worked mass and
growth examples, doubling conventions, generator contracts, persistence."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ndbmo import _kernels
from ndbmo.geometry import Ball, Cube, DyadicCube, DyadicSystem, Point, dilate
from ndbmo.measure import (
    GENERATOR_KINDS,
    PointMeasure,
    generate,
    growth_constant,
    is_doubling,
    load_measure,
    load_measure_csv,
    make_radius_grid,
    mass,
    normalize_growth,
    save_measure,
)


def brute_ball_mass(points, weights, center, radius):
    d2 = np.zeros(len(points))
    for i in range(points.shape[1]):
        d = points[:, i] - center[i]
        d2 += d * d
    return float(np.sum(weights[d2 <= radius * radius]))


def brute_min_dist(points):
    n = len(points)
    best = np.inf
    for i in range(n):
        for j in range(i + 1, n):
            best = min(best, float(np.linalg.norm(points[i] - points[j])))
    return best


def measure_1d(coords, weights, n=1.0):
    return PointMeasure(1, n, np.asarray(coords, float).reshape(-1, 1), np.asarray(weights, float))


class TestKernels:
    @pytest.mark.parametrize("dim", [1, 2, 3])
    def test_ball_masses_match_bruteforce(self, dim):
        rng = np.random.default_rng(dim)
        pts = rng.random((180, dim)) * 3.0 - 1.0
        w = rng.random(180) + 0.1
        for radius in (1e-4, 0.05, 0.4, 2.5, 60.0):
            got = _kernels.ball_masses_all_centers(pts, w, radius)
            want = [brute_ball_mass(pts, w, pts[j], radius) for j in range(len(pts))]
            assert np.allclose(got, want, rtol=1e-12, atol=0.0)

    @pytest.mark.parametrize("dim", [1, 2, 3])
    def test_min_pairwise_matches_bruteforce(self, dim):
        rng = np.random.default_rng(10 + dim)
        cases = [
            rng.random((150, dim)),
            rng.random((60, dim)) * 1e6,  # wide extent exercises cell clamping
        ]
        near = rng.random((40, dim)) * 100.0
        near[7] = near[31] + 1e-5
        cases.append(near)
        for pts in cases:
            assert _kernels.min_pairwise_distance(pts) == pytest.approx(
                brute_min_dist(pts), rel=1e-12
            )

    def test_min_pairwise_degenerate(self):
        assert _kernels.min_pairwise_distance(np.zeros((1, 2))) == math.inf


class TestMass:
    def test_three_atom_interval(self):
        mu = measure_1d([0.0, 1.0, 2.0], [0.1, 0.2, 0.3])
        region = Cube(Point((0.75,)), 1.5)  # the interval [0, 1.5)
        assert mass(mu, region) == pytest.approx(0.3, rel=1e-15)

    def test_unit_mass_examples(self):
        mu = PointMeasure(2, 2.0, np.zeros((1, 2)), np.ones(1))
        assert mass(mu, Ball(Point((0.0, 0.0)), 1.0)) == 1.0
        assert mass(mu, Cube(Point((2.0, 2.0)), 1.0)) == 0.0

    def test_half_open_cube_closed_ball(self):
        mu = measure_1d([0.5], [1.0])
        assert mass(mu, Cube(Point((0.25,)), 0.5)) == 0.0  # [0, 0.5) misses 0.5
        assert mass(mu, Ball(Point((0.0,)), 0.5)) == 1.0  # ball boundary counts

    def test_dimension_mismatch(self):
        mu = measure_1d([0.0], [1.0])
        with pytest.raises(ValueError):
            mass(mu, Ball(Point((0.0, 0.0)), 1.0))

    @given(
        data=st.data(),
        dim=st.integers(1, 3),
        k=st.integers(0, 2),
    )
    @settings(max_examples=60, deadline=None)
    def test_additive_over_dyadic_children(self, data, dim, k):
        grid = data.draw(
            st.sets(
                st.tuples(*[st.integers(0, 2**12 - 1) for _ in range(dim)]),
                min_size=1,
                max_size=25,
            )
        )
        pts = np.asarray(sorted(grid), dtype=np.float64) / 2**12
        w = np.asarray(
            data.draw(
                st.lists(st.integers(1, 50), min_size=len(pts), max_size=len(pts))
            ),
            dtype=np.float64,
        )
        mu = PointMeasure(dim, float(dim), pts, w)
        sigma = tuple(data.draw(st.integers(0, 2)) for _ in range(dim))
        system = DyadicSystem(sigma)
        anchor = tuple(float(c) for c in pts[0])
        parent = system.cube_containing(k, anchor)
        total = mass(mu, parent)
        split = [mass(mu, child) for child in parent.children()]
        assert total == sum(split)  # integer weights make both sides exact

    @given(
        center=st.floats(-2, 2, allow_nan=False),
        side=st.floats(0.1, 3, allow_nan=False),
    )
    @settings(max_examples=60, deadline=None)
    def test_monotone_under_dilation(self, center, side):
        rng = np.random.default_rng(3)
        mu = measure_1d(rng.random(30) * 4 - 2, rng.random(30) + 0.01)
        q = Cube(Point((center,)), side)
        assert mass(mu, q) <= mass(mu, dilate(q, 2.0))


class TestGrowth:
    def test_single_atom(self):
        mu = measure_1d([0.3], [3.5])
        rep = growth_constant(mu, [0.5])
        assert rep.c_mu_estimate == 3.5 / 0.5
        assert rep.witness == (Point((0.3,)), 0.5)
        assert "grid" in rep.note

    def test_four_equispaced(self):
        mu = measure_1d([0.0, 1 / 3, 2 / 3, 1.0], [0.25] * 4)
        rep = growth_constant(mu, [1.0])
        assert rep.c_mu_estimate == 1.0

    def test_witness_prefers_low_index(self):
        mu = measure_1d([0.0, 10.0], [1.0, 1.0])
        rep = growth_constant(mu, [0.5, 1.0])
        assert rep.witness == (Point((0.0,)), 0.5)

    def test_normalize_worked_example(self):
        mu = measure_1d([0.0], [4.0])
        out = normalize_growth(mu, [2.0])
        assert out.weights[0] == 2.0
        assert growth_constant(out, [2.0]).c_mu_estimate == 1.0

    def test_normalize_identity_case(self):
        mu = measure_1d([0.0], [1.0])
        assert normalize_growth(mu, [1.0]) is mu

    @given(seed=st.integers(0, 50), count=st.integers(2, 40))
    @settings(max_examples=25, deadline=None)
    def test_renormalized_estimate_is_one(self, seed, count):
        rng = np.random.default_rng(seed)
        pts = np.unique(rng.random(count))
        mu = measure_1d(pts, rng.random(len(pts)) + 0.05)
        grid = make_radius_grid(mu)
        out = normalize_growth(mu, grid)
        assert growth_constant(out, grid).c_mu_estimate == pytest.approx(1.0, abs=1e-12)

    def test_empty_grid_rejected(self):
        mu = measure_1d([0.0], [1.0])
        with pytest.raises(ValueError):
            growth_constant(mu, [])


class TestRadiusGrid:
    def test_default_span_and_ratio(self):
        mu = measure_1d([0.0, 0.25, 0.5, 1.0], [1, 1, 1, 1])
        grid = make_radius_grid(mu)
        assert grid[0] == 0.25 / 4
        assert grid[-1] >= 2.0 * mu.extent
        ratios = np.diff(np.log(np.asarray(grid)))
        assert np.allclose(ratios, math.log(2) / 4)

    def test_single_atom_grid(self):
        mu = measure_1d([0.7], [1.0])
        assert make_radius_grid(mu) == (1.0,)

    def test_bad_ratio(self):
        mu = measure_1d([0.0], [1.0])
        with pytest.raises(ValueError):
            make_radius_grid(mu, ratio=1.0)


class TestDoubling:
    def test_single_atom_always_doubling(self):
        mu = measure_1d([0.0], [1.0])
        assert is_doubling(mu, Ball(Point((0.0,)), 1.0), 2.0, 1.0)

    def test_heavy_neighbor_breaks_doubling(self):
        mu = measure_1d([0.0, 1.5], [1.0, 10.0])
        assert not is_doubling(mu, Ball(Point((0.0,)), 1.0), 2.0, 5.0)

    def test_zero_mass_region_not_doubling(self):
        mu = measure_1d([0.0], [1.0])
        assert not is_doubling(mu, Ball(Point((50.0,)), 1.0), 2.0, 1e9)

    def test_dyadic_cube_region(self):
        mu = measure_1d([0.3], [1.0])
        cube = DyadicSystem((0,)).cube_containing(1, (0.3,))
        assert is_doubling(mu, cube, 2.0, 1.0)

    def test_parameter_validation(self):
        mu = measure_1d([0.0], [1.0])
        with pytest.raises(ValueError):
            is_doubling(mu, Ball(Point((0.0,)), 1.0), 0.5, 1.0)
        with pytest.raises(ValueError):
            is_doubling(mu, Ball(Point((0.0,)), 1.0), 2.0, 0.0)

    @given(
        beta=st.floats(0.5, 20),
        bump=st.floats(0.0, 30),
        radius=st.floats(0.1, 2.0),
    )
    @settings(max_examples=80, deadline=None)
    def test_monotone_in_beta(self, beta, bump, radius):
        rng = np.random.default_rng(11)
        mu = measure_1d(rng.random(25) * 3, rng.random(25) + 0.01)
        region = Ball(Point((1.5,)), radius)
        if is_doubling(mu, region, 2.0, beta):
            assert is_doubling(mu, region, 2.0, beta + bump)


class TestValidation:
    def test_duplicate_points_rejected(self):
        with pytest.raises(ValueError, match="distinct"):
            measure_1d([0.1, 0.1], [1.0, 1.0])

    def test_nonpositive_weight_rejected(self):
        with pytest.raises(ValueError):
            measure_1d([0.0, 1.0], [1.0, 0.0])

    def test_growth_exponent_range(self):
        with pytest.raises(ValueError):
            measure_1d([0.0], [1.0], n=1.5)
        with pytest.raises(ValueError):
            measure_1d([0.0], [1.0], n=0.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            PointMeasure(1, 1.0, np.zeros((0, 1)), np.zeros(0))

    def test_arrays_frozen(self):
        mu = measure_1d([0.0], [1.0])
        with pytest.raises(ValueError):
            mu.weights[0] = 2.0


def assert_on_odd_grid(points):
    scaled = np.ldexp(points, 41)
    assert np.all(scaled == np.round(scaled))
    assert np.all(np.asarray(scaled, dtype=np.int64) % 2 == 1)


class TestGenerate:
    def test_uniform_cube_contract(self):
        mu = generate("uniform_cube", seed=7, count=100)
        assert len(mu) == 100 and mu.dim == 1
        assert np.all(mu.weights == mu.weights[0])
        assert growth_constant(mu).c_mu_estimate == pytest.approx(1.0, abs=1e-12)
        assert_on_odd_grid(mu.points)

    def test_deterministic_in_seed(self):
        a = generate("uniform_cube", seed=3, count=50, dim=2)
        b = generate("uniform_cube", seed=3, count=50, dim=2)
        c = generate("uniform_cube", seed=4, count=50, dim=2)
        assert np.array_equal(a.points, b.points) and np.array_equal(a.weights, b.weights)
        assert not np.array_equal(a.points, c.points)

    def test_atoms_avoid_cube_boundaries(self):
        mu = generate("uniform_cube", seed=1, count=40, dim=2)
        for sigma in itertools.product((0, 1, 2), repeat=2):
            system = DyadicSystem(sigma)
            for k in range(0, 13):
                for row in mu.points:
                    cube = system.cube_containing(k, tuple(row))
                    assert all(lo < x for lo, x in zip(cube.lo, row))
                    assert all(x < hi for x, hi in zip(row, cube.hi))

    def test_segment_in_plane(self):
        mu = generate("segment_in_plane", seed=2, count=64)
        assert mu.dim == 2 and mu.growth_exp == 1.0
        assert np.all(np.abs(mu.points[:, 0] - mu.points[:, 1]) < 2.0**-38)
        with pytest.raises(ValueError):
            generate("segment_in_plane", n=2.0)

    def test_power_law_exponent_guard(self):
        with pytest.raises(ValueError, match="below the growth exponent"):
            generate("power_law_density", a=1.0, n=1.0)
        mu = generate("power_law_density", seed=5, count=80, a=0.4)
        assert growth_constant(mu).c_mu_estimate == pytest.approx(1.0, abs=1e-12)

    def test_cantor_product_word_weights(self):
        mu = generate("cantor_product", depth=5)
        assert len(mu) == 32
        oracle = []
        for word in itertools.product((0, 1), repeat=5):
            w = 1.0
            for letter in word:
                w *= (1 / 3, 2 / 3)[letter]
            oracle.append(w)
        got = np.sort(mu.weights) / np.min(mu.weights)
        want = np.sort(np.asarray(oracle)) / np.min(oracle)
        assert np.allclose(got, want, rtol=1e-12)

    def test_cantor_depth_two_exact_ratios(self):
        mu = generate("cantor_product", depth=2)
        ratios = np.sort(mu.weights) / np.min(mu.weights)
        assert list(ratios) == [1.0, 2.0, 2.0, 4.0]

    def test_cantor_product_dim_two(self):
        mu = generate("cantor_product", depth=3, dim=2)
        assert len(mu) == 64 and mu.dim == 2
        assert mu.growth_exp == pytest.approx(2 * math.log(2) / math.log(3))

    def test_cantor_depth_cap(self):
        with pytest.raises(ValueError, match="depth"):
            generate("cantor_product", depth=18)

    def test_accumulating_geometric_weights(self):
        mu = generate("accumulating_atoms", count=10, ratio=0.5)
        w = mu.weights
        assert all(w[i] / w[i + 1] == 2.0 for i in range(9))
        x = mu.points[:, 0]
        assert np.all(np.diff(x) < 0)

    def test_accumulating_weight_budget(self):
        mu = generate("accumulating_atoms", count=405, ratio=0.5)
        assert len(np.unique(mu.weights)) <= 40
        assert mu.total_mass / float(np.min(mu.weights)) <= 2.0**28

    def test_accumulating_ratio_guard(self):
        with pytest.raises(ValueError, match="ratio"):
            generate("accumulating_atoms", ratio=0.9)

    def test_unknown_kind_and_params(self):
        with pytest.raises(ValueError, match="unknown kind"):
            generate("poisson")
        with pytest.raises(ValueError, match="unknown parameters"):
            generate("uniform_cube", sides=3)

    def test_all_kinds_normalized(self):
        for kind in GENERATOR_KINDS:
            mu = generate(kind, seed=9, **({"count": 30} if kind != "cantor_product" else {"depth": 4}))
            assert growth_constant(mu).c_mu_estimate == pytest.approx(1.0, abs=1e-12)


class TestPersistence:
    def test_json_round_trip_exact(self, tmp_path):
        mu = generate("power_law_density", seed=13, count=37, a=0.3)
        path = tmp_path / "mu.json"
        save_measure(mu, path)
        back = load_measure(path)
        assert back.dim == mu.dim and back.growth_exp == mu.growth_exp
        assert np.array_equal(back.points, mu.points)
        assert np.array_equal(back.weights, mu.weights)

    def test_json_missing_field(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"dim": 1, "points": [[0.0]]}')
        with pytest.raises(ValueError, match="missing field"):
            load_measure(path)

    def test_csv_import(self, tmp_path):
        path = tmp_path / "atoms.csv"
        path.write_text("x,y,weight\n0.125,0.25,1.5\n0.5,0.75,2.5\n")
        mu = load_measure_csv(path, growth_exp=2.0)
        assert mu.dim == 2
        assert np.array_equal(mu.points, [[0.125, 0.25], [0.5, 0.75]])
        assert np.array_equal(mu.weights, [1.5, 2.5])

    def test_csv_bad_rows(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("0.1,1.0\n0.2,2.0,3.0\n")
        with pytest.raises(ValueError, match="inconsistent"):
            load_measure_csv(path, growth_exp=1.0)
