import numpy as np
import pytest

from chainlab import lattice as lat
from chainlab.errors import ConfigurationError, DomainError


class TestWindow:
    def test_1d_counting(self):
        w = lat.make_window([-2], [3])
        assert w.site_count == 5
        assert w.total_mass == 5.0

    def test_rescaled_mass(self):
        w = lat.make_window([0, 0], [4, 4], scale=2)
        assert w.site_count == 16
        assert w.total_mass == pytest.approx(4.0)
        assert w.site_mass == pytest.approx(0.25)

    def test_indexer_roundtrip_3d(self):
        w = lat.make_window([0, 0, 0], [2, 2, 2])
        pts = w.coords
        assert len(pts) == 8
        assert np.array_equal(w.point(w.index(pts)), pts)

    def test_indexer_bijection_random_window(self):
        w = lat.make_window([-3, 5], [4, 9])
        idx = w.index(w.coords)
        assert sorted(idx.tolist()) == list(range(w.site_count))

    def test_bad_corners(self):
        with pytest.raises(ConfigurationError):
            lat.make_window([0, 0], [0, 4])

    def test_overflow_guard(self):
        with pytest.raises(ConfigurationError):
            lat.make_window([0] * 4, [10_000] * 4)

    def test_point_outside_raises(self):
        w = lat.make_window([0], [4])
        with pytest.raises(DomainError):
            w.index([7])


class TestSets:
    def test_open_ball_radius_1p5(self):
        # brute-force oracle over the surrounding block
        w = lat.make_window([-3, -3], [4, 4])
        ball = lat.make_set(w, lat.Ball((0, 0), 1.5))
        expected = set()
        for a in range(-3, 4):
            for b in range(-3, 4):
                if (a * a + b * b) ** 0.5 < 1.5:
                    expected.add((a, b))
        got = set(map(tuple, ball.points().tolist()))
        assert got == expected
        assert ball.site_count == 9  # diagonal neighbours at sqrt(2) qualify

    def test_open_cube_radius_1(self):
        w = lat.make_window([-3, -3], [4, 4])
        cube = lat.make_set(w, lat.Cube((0, 0), 1.0))
        assert set(map(tuple, cube.points().tolist())) == {(0, 0)}

    def test_tiny_ball_is_singleton(self):
        w = lat.make_window([-3], [4])
        ball = lat.make_set(w, lat.Ball((1,), 0.5))
        assert set(map(tuple, ball.points().tolist())) == {(1,)}

    def test_scaled_membership(self):
        # physical radius 1.5 at scale 2 -> integer radius 3 (strict)
        w = lat.make_window([-8], [9], scale=2)
        ball = lat.make_set(w, lat.Ball((0,), 1.5))
        assert ball.site_count == 5  # {-2,...,2}

    def test_clipping_flag(self):
        w = lat.make_window([-2, -2], [3, 3])
        clipped = lat.make_set(w, lat.Ball((0, 0), 4.0))
        assert clipped.clipped
        tight = lat.make_set(w, lat.Ball((0, 0), 1.5))
        assert not tight.clipped

    def test_center_outside_rejected(self):
        w = lat.make_window([0, 0], [4, 4])
        with pytest.raises(DomainError):
            lat.make_set(w, lat.Ball((9, 9), 1.0))

    def test_cube_contains_ball(self):
        w = lat.make_window([-10, -10], [11, 11])
        for r in (0.5, 1.0, 1.5, 2.5, 3.7, 5.0):
            ball = lat.make_set(w, lat.Ball((0, 0), r))
            cube = lat.make_set(w, lat.Cube((0, 0), r))
            assert not (ball.mask & ~cube.mask).any()

    def test_measure_additivity(self):
        w = lat.make_window([-10, -10], [11, 11])
        rng = np.random.Generator(np.random.Philox(key=np.array([5, 0], dtype=np.uint64)))
        for _ in range(20):
            c1 = tuple(rng.integers(-5, 6, size=2))
            c2 = tuple(rng.integers(-5, 6, size=2))
            a = lat.make_set(w, lat.Ball(c1, float(rng.uniform(0.5, 4.0))))
            b = lat.make_set(w, lat.Cube(c2, float(rng.uniform(0.5, 4.0))))
            lhs = a.union(b).measure + a.intersection(b).measure
            assert lhs == pytest.approx(a.measure + b.measure, abs=0)

    def test_explicit_set(self):
        w = lat.make_window([0], [4])
        s = lat.make_set(w, lat.Explicit(((0,), (2,), (9,))))
        assert s.site_count == 2
        assert s.clipped
