import math

import numpy as np
import pytest

from chainlab import conductance as cd
from chainlab import forms
from chainlab.errors import DomainError
from chainlab.lattice import make_window


def path_model(rate=1.0):
    return cd.table_model([((1,), rate)], dim=1)


class TestDirichletEnergy:
    def test_constants_have_zero_energy(self):
        form = forms.build_form(path_model(), make_window([0], [6]))
        assert forms.dirichlet_energy(form, np.full(6, 7.0)) == 0.0

    def test_two_site_hand_value(self):
        form = forms.build_form(path_model(3.0), make_window([0], [2]))
        # (1/2) * 2 * (2-0)^2 * 3 = 12
        assert forms.dirichlet_energy(form, np.array([0.0, 2.0])) == 12.0

    def test_matches_brute_force_double_sum(self):
        model = cd.stable_like(1.0, 1)
        w = make_window([0], [5])
        form = forms.build_form(model, w)
        rng = np.random.Generator(np.random.Philox(key=np.array([21, 0], dtype=np.uint64)))
        f = rng.standard_normal(5)
        # oracle: full O(n^2) ordered double sum with the 1/2 prefactor
        total = 0.0
        pts = w.coords
        for i in range(5):
            for j in range(5):
                cij = cd.eval_conductance(model, pts[i], pts[j])
                total += 0.5 * cij * (f[j] - f[i]) ** 2
        assert forms.dirichlet_energy(form, f) == pytest.approx(total, rel=1e-13)

    def test_shift_invariance_exact_on_dyadics(self):
        form = forms.build_form(cd.stable_like(1.0, 1), make_window([0], [9]))
        rng = np.random.Generator(np.random.Philox(key=np.array([21, 1], dtype=np.uint64)))
        f = rng.integers(0, 256, size=9).astype(np.float64) / 256.0
        assert forms.dirichlet_energy(form, f) == forms.dirichlet_energy(form, f + 3.0)

    def test_quadratic_scaling(self):
        form = forms.build_form(cd.stable_like(1.0, 1), make_window([0], [9]))
        rng = np.random.Generator(np.random.Philox(key=np.array([21, 2], dtype=np.uint64)))
        f = rng.standard_normal(9)
        for lam in (0.25, 3.0, -7.5):
            assert forms.dirichlet_energy(form, lam * f) == pytest.approx(
                lam * lam * forms.dirichlet_energy(form, f), rel=1e-12)


class TestNash:
    def test_single_site_indicator(self):
        # indicator at a window corner: one neighbour, all norms unity
        form = forms.build_form(path_model(), make_window([0], [2]))
        f = np.array([1.0, 0.0])
        assert forms.nash_ratio(form, f, alpha=1.0, d=1) == 1.0

    def test_zero_energy_reports_inf(self):
        form = forms.build_form(path_model(), make_window([0], [4]))
        assert forms.nash_ratio(form, np.ones(4), alpha=1.0, d=1) == math.inf

    def test_zero_function_rejected(self):
        form = forms.build_form(path_model(), make_window([0], [4]))
        with pytest.raises(DomainError):
            forms.nash_ratio(form, np.zeros(4), 1.0, 1)

    def test_ensemble_ratio_stable_across_windows(self):
        model = cd.stable_like(1.0, 2)
        rng = np.random.Generator(np.random.Philox(key=np.array([21, 3], dtype=np.uint64)))
        maxima = []
        for half in (16, 24):
            w = make_window([-half] * 2, [half] * 2)
            form = forms.build_form(model, w)
            best = 0.0
            for _ in range(100):
                f = rng.standard_normal(w.site_count)
                best = max(best, forms.nash_ratio(form, f, 1.0, 2))
            maxima.append(best)
        assert maxima[1] == pytest.approx(maxima[0], rel=0.5)

    def test_two_term_bound_holds_pointwise(self):
        model = cd.stable_like(1.0, 1)
        w = make_window([-16], [17])
        form = forms.build_form(model, w)
        rng = np.random.Generator(np.random.Philox(key=np.array([21, 4], dtype=np.uint64)))
        fs = [rng.standard_normal(w.site_count) for _ in range(20)]
        s_grid = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0]
        c4, c5 = forms.nash_two_term_constants(form, fs, s_grid, 1.0, 1)
        for f in fs:
            l1 = float(np.abs(f).sum())
            l2sq = float((f * f).sum())
            e = forms.dirichlet_energy(form, f)
            for s in s_grid:
                assert l2sq <= c4 * s ** 1.0 * e + c5 * s ** (-1.0) * l1 * l1 + 1e-12


class TestRayleigh:
    def test_two_site_poincare_by_hand(self):
        # variance form vs path energy: max ratio = 1/2 at f = (0, 1)
        M = np.array([[0.5, -0.5], [-0.5, 0.5]])
        E = np.array([[1.0, -1.0], [-1.0, 1.0]])
        lam, f = forms.max_generalized_rayleigh(M, E, 2)
        assert lam == pytest.approx(0.5, abs=1e-12)
        assert abs(f[0] + f[1]) < 1e-9  # deflated: orthogonal to constants

    def test_two_site_weighted_closed_form(self):
        # weights w (sum 1), pair coefficient k: ratio = w0 w1 / k
        w0, w1, c, phimin = 0.65, 0.35, 3.0, 0.4
        k = 2.0 * c * phimin
        w = np.array([w0, w1])
        M = np.diag(w) - np.outer(w, w)
        E = k * np.array([[1.0, -1.0], [-1.0, 1.0]])
        lam, _ = forms.max_generalized_rayleigh(M, E, 2)
        assert lam == pytest.approx(w0 * w1 / k, abs=1e-12)

    def test_iterative_path_matches_dense(self):
        model = cd.stable_like(1.0, 1)
        w = make_window([-10], [11])
        form = forms.build_form(model, w)
        L = form.laplacian().toarray()
        n = w.site_count
        M = np.eye(n) - np.ones((n, n)) / n
        dense_lam, _ = forms.max_generalized_rayleigh(M, L, n, dense=True)
        it_lam, _ = forms.max_generalized_rayleigh(M, L, n, dense=False)
        assert it_lam == pytest.approx(dense_lam, rel=1e-8)


class TestPoincare:
    def test_matches_box_laplacian_oracle(self):
        model = cd.nearest_neighbor(1)
        for side in (4, 8, 16):
            r = side / 2.0
            res = forms.best_poincare_constant(model, (0,), r, kappa5=1.0)
            m = side - 1  # open cube of side 2r on Z
            lam1 = 2.0 * (1.0 - math.cos(math.pi / m))
            assert res.constant == pytest.approx(1.0 / lam1 / r ** 2, rel=1e-9)

    def test_extremal_is_not_constant(self):
        res = forms.best_poincare_constant(cd.nearest_neighbor(1), (0,), 4.0)
        assert np.ptp(res.extremal) > 1e-6

    def test_scale_consistency_stable_2d(self):
        model = cd.stable_like(1.0, 2)
        k8 = forms.best_poincare_constant(model, (0, 0), 4.0).constant
        k16 = forms.best_poincare_constant(model, (0, 0), 8.0).constant
        assert max(k8, k16) / min(k8, k16) < 2.0

    def test_disconnected_reported(self):
        # only distance-2 jumps on a 3-site window: the middle site is isolated
        model = cd.table_model([((2,), 1.0)], dim=1)
        res = forms.best_poincare_constant(model, (0,), 1.5)
        assert not res.connected
        assert res.detail["components"] > 1

    def test_check_a4_nearest_neighbor(self):
        rep = forms.check_A4_scaling(cd.nearest_neighbor(1), sides=[4, 8, 16])
        assert rep.passed
        assert rep.constants["spread"] <= 4.0

    def test_check_a4_with_rescalings_matches_shifted_sides(self):
        # constant at (rho=2, side s) must equal the one at (rho=1, side 2s)
        rep = forms.check_A4_scaling(cd.nearest_neighbor(1), sides=[4, 8], rhos=(1, 2))
        rows = {(row["rho"], row["side"]): row["kappa4"]
                for row in rep.constants["kappa4_by_case"]}
        assert rows[(2, 4)] == pytest.approx(rows[(1, 8)], rel=1e-9)
        assert rep.passed

    def test_check_a4_disconnected_fails_with_witness(self):
        model = cd.table_model([((2,), 1.0)], dim=1)
        rep = forms.check_A4_scaling(model, sides=[4])
        assert not rep.passed
        assert rep.witness is not None


class TestWeightPhi:
    def test_single_site_cube(self):
        w = make_window([-3], [4])
        prof = forms.weight_phi(w, (0,), 1.0)
        assert prof.values[w.index((0,))] == pytest.approx(1.0)
        assert prof.values.sum() == pytest.approx(1.0)

    def test_hand_example_d1(self):
        w = make_window([-3], [4])
        prof = forms.weight_phi(w, (0,), 1.5)
        assert prof.c1 == pytest.approx(1.0 / 4.75, abs=1e-15)
        assert prof.values[w.index((0,))] == pytest.approx(2.25 / 4.75)
        assert prof.values[w.index((1,))] == pytest.approx(1.25 / 4.75)

    def test_zero_outside_cube(self):
        w = make_window([-5], [6])
        prof = forms.weight_phi(w, (0,), 2.0)
        for u in (-5, -4, -3, -2, 2, 3, 4, 5):
            assert prof.values[w.index((u,))] == 0.0

    @pytest.mark.parametrize("rho,R", [(1, 2.5), (2, 1.75), (3, 2.0)])
    def test_mass_normalization(self, rho, R):
        w = make_window([-12], [13], scale=rho)
        prof = forms.weight_phi(w, (0,), R)
        assert abs(prof.mass_weights.sum() - 1.0) < 1e-12

    def test_degenerate_cube_rejected(self):
        w = make_window([-2], [3])
        with pytest.raises(DomainError):
            forms.weight_phi(w, (0,), 10.0)  # cube escapes the window


class TestWeightedPoincare:
    def test_three_site_against_direct_eigensolve(self):
        model = cd.stable_like(1.0, 1)
        res = forms.weighted_poincare_constant(model, (0,), 1.5, rho=1)
        # independent dense oracle on the 3-site cube
        w = make_window([-1], [2])
        prof = forms.weight_phi(w, (0,), 1.5)
        wts = prof.mass_weights
        M = np.diag(wts) - np.outer(wts, wts)
        form = forms.build_form(model, w)
        phi = prof.values
        pm = np.minimum(phi[form.rows], phi[form.cols])
        E = forms.QuadraticForm(w, form.rows, form.cols, 2.0 * form.coeffs * pm).laplacian()
        lam, _ = forms.max_generalized_rayleigh(M, E.toarray(), 3)
        assert res.rayleigh == pytest.approx(lam, rel=1e-12)
        assert res.constant == pytest.approx(lam / 1.5, rel=1e-12)

    def test_grid_flag(self):
        model = cd.stable_like(1.0, 1)
        assert forms.weighted_poincare_constant(model, (0,), 3.0, rho=1).on_grid
        assert forms.weighted_poincare_constant(model, (0,), 3.0, rho=2).on_grid
        assert not forms.weighted_poincare_constant(model, (0,), 2.1, rho=1).on_grid

    def test_rho_uniformity_quick(self):
        model = cd.stable_like(1.0, 1)
        c1 = forms.weighted_poincare_constant(model, (0,), 3.0, rho=1).constant
        c2 = forms.weighted_poincare_constant(model, (0,), 3.0, rho=2).constant
        assert max(c1, c2) / min(c1, c2) < 4.0
