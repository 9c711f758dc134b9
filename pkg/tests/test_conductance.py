import math

import numpy as np
import pytest

from chainlab import conductance as cd
from chainlab.errors import ConfigurationError, DomainError


def weight_checker(x, y):
    """Symmetric, bounded coefficient in [0.5, 1.5] depending on both endpoints."""
    s = (x + y).sum(axis=-1)
    return 1.0 + 0.5 * np.cos(s)


class TestEvalConductance:
    def test_stable_like_example(self):
        model = cd.stable_like(alpha=1.0, dim=2)
        # |y-x| = 5, exponent d+alpha = 3 -> 1/125
        assert cd.eval_conductance(model, (0, 0), (3, 4)) == pytest.approx(1.0 / 125.0, abs=0)

    def test_diagonal_vanishes(self):
        for model in [cd.stable_like(1.0, 2), cd.axis_stable_like(1.0, 2),
                      cd.sparse_long_range(3), cd.nearest_neighbor(1)]:
            x = np.zeros(model.dim, dtype=int)
            assert cd.eval_conductance(model, x, x) == 0.0

    def test_axis_model_off_axis_zero(self):
        model = cd.axis_stable_like(alpha=1.0, dim=2)
        assert cd.eval_conductance(model, (0, 0), (1, 1)) == 0.0
        # on-axis rate uses exponent 1+alpha regardless of dim
        assert cd.eval_conductance(model, (0, 0), (0, 3)) == pytest.approx(1.0 / 9.0)

    def test_dimension_mismatch(self):
        model = cd.stable_like(1.0, 2)
        with pytest.raises(ConfigurationError):
            cd.eval_conductance(model, (0, 0, 0), (1, 1, 1))

    def test_axis_model_needs_dim2(self):
        with pytest.raises(ConfigurationError):
            cd.axis_stable_like(1.0, 1)

    def test_nonsymmetric_table_rejected(self):
        with pytest.raises(ConfigurationError):
            cd.table_model([((1,), 1.0), ((-1,), 2.0)], dim=1)


class TestSymmetryProperty:
    @pytest.mark.parametrize("model", [
        cd.stable_like(1.0, 2),
        cd.stable_like(0.5, 1, c_lo=0.5, c_hi=1.5, weight_fn=weight_checker),
        cd.axis_stable_like(1.5, 2),
        cd.sparse_long_range(3),
        cd.table_model([((1, 0), 2.0), ((2, 1), 0.25)], dim=2),
    ])
    def test_exact_symmetry_on_random_pairs(self, model):
        rng = np.random.Generator(np.random.Philox(key=np.array([7, 1], dtype=np.uint64)))
        x = rng.integers(-40, 41, size=(10_000, model.dim))
        y = rng.integers(-40, 41, size=(10_000, model.dim))
        fwd = cd.pair_rates(model, x, y)
        bwd = cd.pair_rates(model, y, x)
        assert np.array_equal(fwd, bwd)
        assert (fwd >= 0).all()

    def test_check_a1_report(self):
        rep = cd.check_A1(cd.stable_like(1.0, 2, c_lo=0.5, c_hi=1.5, weight_fn=weight_checker))
        assert rep.passed
        assert rep.constants["max_symmetry_gap"] == 0.0


class TestEnvelope:
    @pytest.mark.parametrize("model", [
        cd.stable_like(1.0, 2),
        cd.axis_stable_like(1.0, 2),
        cd.sparse_long_range(3),
        cd.table_model([((1, 0), 2.0), ((2, 1), 0.25)], dim=2),
    ])
    def test_envelope_dominates_rates(self, model):
        rng = np.random.Generator(np.random.Philox(key=np.array([11, 2], dtype=np.uint64)))
        env = cd.envelope(model)
        x = rng.integers(-20, 21, size=(2000, model.dim))
        y = rng.integers(-20, 21, size=(2000, model.dim))
        rates = cd.pair_rates(model, x, y)
        dist = np.sqrt(((y - x).astype(float) ** 2).sum(axis=1))
        for rate, s in zip(rates, dist):
            if s > 0:
                assert rate <= env.phi(float(s)) + 1e-15

    def test_tail_bound_dominates_true_tail_1d(self):
        # brute-force oracle: direct sum well beyond the bound's radius
        p = 2.0
        ks = np.arange(101, 2_000_000, dtype=np.float64)
        true_tail = 2.0 * np.sum(ks ** -p) + 2.0 / 2_000_000.0  # remainder < integral
        bound = cd.radial_power_tail(1, p, 100.0)
        assert bound >= true_tail
        assert bound <= true_tail * 1.05

    def test_tail_bound_dominates_true_tail_2d(self):
        p = 3.0
        z = cd._ball_displacements(2, 600.0)
        r = np.sqrt((z.astype(float) ** 2).sum(axis=1))
        partial = float(np.sum(r[r > 30.0] ** -p))
        bound = cd.radial_power_tail(2, p, 30.0)
        assert bound >= partial  # enumerated part alone must already be covered
        # and it is not wildly loose
        assert bound <= partial * 1.35


class TestVertexRate:
    def test_sparse_long_range_total_is_one(self):
        model = cd.sparse_long_range(3)
        for radius in (2.0, 20.0, 64.0):
            value, tail = cd.vertex_rate(model, (0, 0, 0), radius)
            assert value + tail == 1.0

    def test_sparse_total_one_at_every_site(self):
        model = cd.sparse_long_range(3)
        rng = np.random.Generator(np.random.Philox(key=np.array([3, 3], dtype=np.uint64)))
        for site in rng.integers(-1000, 1000, size=(20, 3)):
            assert cd.vertex_rate_total(model, site, 32.0) == 1.0

    def test_axis_vertex_rate_matches_zeta(self):
        # oracle: partial sum + integral tail bracket, then the analytic value
        model = cd.axis_stable_like(alpha=1.0, dim=2)
        ks = np.arange(1, 1_000_001, dtype=np.float64)
        partial = 4.0 * np.sum(ks ** -2.0)
        bracket_lo = partial + 4.0 / (1_000_001.0)
        analytic = 4.0 * math.pi ** 2 / 6.0
        assert bracket_lo <= analytic <= partial + 4.0 / 1_000_000.0

        value, tail = cd.vertex_rate(model, (0, 0), 10_000.0)
        assert analytic <= value + tail <= analytic + 1e-6

    def test_table_value_and_zero_tail(self):
        model = cd.table_model([((1,), 1.0)], dim=1)
        value, tail = cd.vertex_rate(model, (0,), 5.0)
        assert value == 2.0
        assert tail == 0.0

    def test_monotone_in_radius(self):
        model = cd.stable_like(1.0, 1)
        radii = [2.0, 4.0, 8.0, 16.0, 32.0]
        values = []
        uppers = []
        for r in radii:
            v, t = cd.vertex_rate(model, (0,), r)
            values.append(v)
            uppers.append(v + t)
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert all(b <= a + 1e-15 for a, b in zip(uppers, uppers[1:]))

    def test_radius_below_one_rejected(self):
        with pytest.raises(DomainError):
            cd.vertex_rate(cd.stable_like(1.0, 1), (0,), 0.5)


class TestCheckA3:
    def test_stable_like_d2(self):
        model = cd.stable_like(alpha=1.0, dim=2)
        rep = cd.check_A3(model, [2, 4, 8, 16])
        assert rep.passed
        assert rep.constants["kappa2_spread"] < 4.0
        assert rep.constants["kappa3_spread"] < 4.0
        # independent oracle for S1(4): brute sum over |z| <= 1000 plus
        # integral-comparison bracket for the remainder
        z = cd._ball_displacements(2, 1000.0)
        r = np.sqrt((z.astype(float) ** 2).sum(axis=1))
        s1_low = float(np.sum(r[r >= 4.0] ** -3.0))
        s1_high = s1_low + cd.radial_power_tail(2, 3.0, 1000.0)
        k2_at_4 = rep.constants["kappa2_by_radius"][1]
        assert s1_low * 4.0 <= k2_at_4 <= s1_high * 4.0 * 1.0000001

    def test_axis_partial_sum_oracle(self):
        model = cd.axis_stable_like(alpha=1.0, dim=2)
        rep = cd.check_A3(model, [2, 4, 8, 16])
        assert rep.passed
        ks = np.arange(2, 3_000_000, dtype=np.float64)
        s1_exact_lo = 4.0 * float(np.sum(ks ** -2.0))
        s1_exact_hi = s1_exact_lo + 4.0 / 3_000_000.0
        measured = rep.constants["kappa2_by_radius"][0] / 2.0  # S1(2) = kappa2(2)/2^alpha
        assert s1_exact_lo <= measured <= s1_exact_hi + 1e-9
        assert measured <= 4.0  # S1(2) <= 4 c_hi

    def test_finite_table_zero_beyond_range(self):
        model = cd.table_model([((1,), 1.0), ((2,), 0.5)], dim=1)
        rep = cd.check_A3(model, [4, 8])
        assert rep.passed
        assert rep.constants["kappa2_by_radius"] == [0.0, 0.0]

    def test_fat_tailed_table_reports_violation(self):
        # rate ~ |z|^-d saturates the tail sums: kappa ratios must blow up
        rows = [((k,), 1.0 / k) for k in range(1, 513)]
        model = cd.table_model(rows, dim=1, alpha=1.0)
        rep = cd.check_A3(model, [2, 4, 8, 16])
        assert not rep.passed
        assert rep.witness is not None

    def test_bad_radii(self):
        with pytest.raises(DomainError):
            cd.check_A3(cd.stable_like(1.0, 1), [])


class TestRescale:
    def test_identity_at_rho_one(self):
        model = cd.stable_like(1.0, 2)
        assert cd.rescale(model, 1) is model

    def test_rescaled_rate_example(self):
        model = cd.stable_like(alpha=1.0, dim=2)
        resc = cd.rescale(model, 2)
        # rho^(alpha-d) * C = 2^-1 / 125
        assert cd.eval_conductance(resc, (0, 0), (3, 4)) == pytest.approx(0.004, abs=1e-18)
        assert resc.scale == 2

    def test_diagonal_preserved(self):
        resc = cd.rescale(cd.stable_like(1.0, 2), 3)
        assert cd.eval_conductance(resc, (5, 5), (5, 5)) == 0.0

    def test_site_mass_recorded(self):
        resc = cd.rescale(cd.stable_like(1.0, 2), 4)
        assert resc.scale == 4  # windows built at this scale carry mass 4^-2

    def test_non_integer_rho_rejected(self):
        with pytest.raises(DomainError):
            cd.rescale(cd.stable_like(1.0, 2), 1.5)


class TestSparseSequences:
    def test_default_sequences_satisfy_constraints(self):
        a, b = cd.default_sparse_sequences()
        assert b == (1, 16, 7625597484987)
        assert sum(a) <= 0.125
        assert math.isfinite(sum(ai * bi * bi for ai, bi in zip(a, b)))
        assert all(bi <= 2 ** 62 for bi in b)

    def test_check_a2_unit_rate(self):
        rep = cd.check_A2(cd.sparse_long_range(3), radius=20.0)
        assert rep.passed
        assert rep.constants["kappa1_lower"] > 0.9
