"""Checks for the scalar potentials against brute-force maximization."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from ssl_gmm_lab import potentials as pot


def envelope_value(p, t, rho, step=0.005):
    # independent oracle: coarse grid over y, then a golden section polish
    # inside the winning cell; never touches the package's Newton solver
    st = np.sqrt(t)
    y = np.arange(-st - 1.0, st + 1.0 + step, step)
    g = -0.5 * y * y + pot.log_label_partition(p + st * y, rho)
    i = int(np.argmax(g))
    i = min(max(i, 1), len(y) - 2)
    a, b = y[i - 1], y[i + 1]

    def gv(yy):
        return -0.5 * yy * yy + float(pot.log_label_partition(p + st * yy, rho))

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = gv(c), gv(d)
    for _ in range(70):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = gv(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = gv(d)
    return max(fc, fd)


class TestLabelMoments:
    def test_f_tilde_matches_direct_ratio(self):
        x = np.linspace(-18.0, 18.0, 181)
        for rho in (0.05, 0.3, 0.5, 0.77):
            num = rho * np.exp(x) - (1.0 - rho) * np.exp(-x)
            den = rho * np.exp(x) + (1.0 - rho) * np.exp(-x)
            assert_allclose(pot.f_tilde(x, rho), num / den, rtol=1e-12, atol=1e-15)

    def test_t_tilde_matches_direct_ratio(self):
        x = np.linspace(-12.0, 12.0, 97)
        for rho in (0.1, 0.5, 0.9):
            den = rho * np.exp(x) + (1.0 - rho) * np.exp(-x)
            direct = 4.0 * rho * (1.0 - rho) / den ** 2
            assert_allclose(pot.t_tilde(x, rho), direct, rtol=1e-12, atol=1e-15)

    def test_t_tilde_matches_finite_difference(self):
        h = 1e-5
        for rho in (0.2, 0.5, 0.8):
            bias = 0.5 * (np.log(rho) - np.log1p(-rho))
            x = np.linspace(-3.0, 3.0, 61) - bias
            fd = (pot.f_tilde(x + h, rho) - pot.f_tilde(x - h, rho)) / (2.0 * h)
            assert_allclose(pot.t_tilde(x, rho), fd, rtol=1e-6)

    def test_saturation_no_overflow(self):
        assert pot.f_tilde(800.0, 0.4) == 1.0
        assert pot.f_tilde(-800.0, 0.4) == -1.0
        assert pot.t_tilde(800.0, 0.4) == 0.0
        assert np.isfinite(pot.log_label_partition(750.0, 0.3))

    def test_edge_priors(self):
        x = np.linspace(-4.0, 4.0, 17)
        assert_allclose(pot.f_tilde(x, 0.0), -1.0)
        assert_allclose(pot.f_tilde(x, 1.0), 1.0)
        assert_allclose(pot.t_tilde(x, 0.0), 0.0)
        assert_allclose(pot.log_label_partition(x, 0.0), -x)
        assert_allclose(pot.log_label_partition(x, 1.0), x)

    def test_logcosh(self):
        x = np.linspace(-15.0, 15.0, 301)
        assert_allclose(pot.logcosh(x), np.log(np.cosh(x)), rtol=1e-13, atol=1e-15)
        assert pot.logcosh(700.0) == 700.0 - np.log(2.0)

    def test_log_label_partition_direct(self):
        x = np.linspace(-10.0, 10.0, 81)
        for rho in (0.15, 0.5, 0.9):
            direct = np.log(rho * np.exp(x) + (1.0 - rho) * np.exp(-x))
            assert_allclose(pot.log_label_partition(x, rho), direct,
                            rtol=1e-12, atol=1e-13)


class TestEnvelopeMaximizer:
    def test_fixed_point_residual(self):
        rng = np.random.default_rng(7)
        p = rng.uniform(-6.0, 6.0, 300)
        t = rng.uniform(0.0, 5.0, 300)
        for rho in (0.2, 0.5, 0.85):
            u = pot._solve_u_star(p, t, rho)
            r = u - p - t * pot.f_tilde(u, rho)
            assert np.max(np.abs(r)) < 1e-10

    def test_matches_brute_force_below_fold(self):
        # F is the p-slope and T the p-curvature of the maximized envelope;
        # staying below t = 0.9 keeps the 1/(1 - t) derivative growth tame
        rng = np.random.default_rng(11)
        h = 1e-4
        for _ in range(60):
            p = rng.uniform(-4.0, 4.0)
            t = rng.uniform(0.02, 0.9)
            rho = rng.uniform(0.05, 0.95)
            e0 = envelope_value(p, t, rho)
            ep = envelope_value(p + h, t, rho)
            em = envelope_value(p - h, t, rho)
            f, tv = pot.f_t_rmle(p, t, rho)
            assert abs(f - (ep - em) / (2.0 * h)) < 1e-5
            assert abs(tv - (ep - 2.0 * e0 + em) / h ** 2) < 1e-5

    def test_scalar_grid_and_vector_solver_agree_above_fold(self):
        rng = np.random.default_rng(23)
        p = rng.uniform(-5.0, 5.0, 120)
        t = rng.uniform(1.05, 6.0, 120)
        rho = rng.uniform(0.1, 0.9, 120)
        for pi, ti, ri in zip(p, t, rho):
            y_grid = pot.solve_y_star(pi, ti, ri)
            u = float(np.asarray(pot._solve_u_star(pi, ti, ri)))
            y_vec = (u - pi) / np.sqrt(ti)
            assert abs(y_grid - y_vec) < 1e-8 * (1.0 + abs(y_grid))

    def test_t_zero_reduces_to_label_moments(self):
        p = np.linspace(-5.0, 5.0, 41)
        for rho in (0.25, 0.5, 0.6):
            f, tv = pot.f_t_rmle(p, 0.0, rho)
            assert_allclose(f, pot.f_tilde(p, rho), rtol=0, atol=1e-12)
            assert_allclose(tv, pot.t_tilde(p, rho), rtol=0, atol=1e-12)

    def test_t_rmle_matches_finite_difference_of_f(self):
        rng = np.random.default_rng(3)
        h = 1e-4
        p = rng.uniform(-3.0, 3.0, 40)
        for t in (0.1, 0.4, 0.7):
            for rho in (0.3, 0.5):
                fd = (pot.f_rmle(p + h, t, rho) - pot.f_rmle(p - h, t, rho)) / (2 * h)
                assert_allclose(pot.t_rmle(p, t, rho), fd, rtol=1e-5, atol=2e-7)

    def test_symmetry_balanced_prior(self):
        p = np.linspace(0.1, 4.0, 25)
        for t in (0.5, 2.5):
            assert_allclose(pot.f_rmle(-p, t, 0.5), -pot.f_rmle(p, t, 0.5),
                            rtol=0, atol=1e-11)
            assert_allclose(pot.t_rmle(-p, t, 0.5), pot.t_rmle(p, t, 0.5),
                            rtol=1e-9, atol=1e-12)

    def test_f_monotone_in_p(self):
        p = np.linspace(-6.0, 6.0, 241)
        for t in (0.3, 0.95):
            f = pot.f_rmle(p, t, 0.35)
            assert np.all(np.diff(f) >= -1e-12)

    def test_prior_edges_saturate(self):
        assert pot.solve_y_star(0.7, 2.0, 0.0) == -np.sqrt(2.0)
        assert pot.solve_y_star(0.7, 2.0, 1.0) == np.sqrt(2.0)
        f, tv = pot.f_t_rmle(np.array([-1.0, 2.0]), 3.0, 0.0)
        assert_allclose(f, -1.0)
        assert_allclose(tv, 0.0)

    def test_singularity_raises(self):
        with pytest.raises(pot.PotentialSingularityError):
            pot.t_rmle(0.0, 1.0, 0.5)

    def test_degenerate_tie_warns(self):
        with pytest.warns(pot.DegenerateMaximizerWarning):
            pot.solve_y_star(0.0, 4.0, 0.5)
        with pytest.warns(pot.DegenerateMaximizerWarning):
            pot.f_rmle(np.array([0.0]), 4.0, 0.5)

    def test_evaluate_potential_bundle(self):
        ev = pot.evaluate_potential(0.7, 3.0, 0.4)
        assert ev.p == 0.7 and ev.t == 3.0
        # stationarity of the reported maximizer
        resid = ev.y_star - np.sqrt(3.0) * pot.f_tilde(0.7 + np.sqrt(3.0) * ev.y_star, 0.4)
        assert abs(resid) < 1e-10
        assert ev.f_val == pot.f_rmle(0.7, 3.0, 0.4)
        g_direct = -0.5 * ev.y_star ** 2 + float(
            pot.log_label_partition(0.7 + np.sqrt(3.0) * ev.y_star, 0.4))
        assert abs(ev.g_val - g_direct) < 1e-12
        assert abs(ev.g_val - envelope_value(0.7, 3.0, 0.4)) < 1e-10

    def test_gaussian_tail(self):
        assert pot.gaussian_tail_q(0.0) == 0.5
        z = np.linspace(-8.0, 8.0, 160001)
        phi = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
        for x in (-1.3, 0.4, 2.0):
            trapz = np.trapezoid(phi[z >= x], z[z >= x]) + pot.gaussian_tail_q(8.0)
            assert abs(pot.gaussian_tail_q(x) - trapz) < 1e-8
        x = np.linspace(-3.0, 3.0, 13)
        assert_allclose(pot.gaussian_tail_q(x) + pot.gaussian_tail_q(-x), 1.0,
                        rtol=1e-13)
