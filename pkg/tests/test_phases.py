"""Phase boundaries, stability integrals, and plane classification."""

import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import quad

from ssl_gmm_lab import phases as ph
from ssl_gmm_lab import potentials as pot
from ssl_gmm_lab import state_evolution as se
from ssl_gmm_lab.model import ModelParams


def make_params(**kw):
    base = dict(rho=0.5, lambda0=1.0, lam=1.0, sigma2=1.0,
                alpha_l=0.0, alpha_u=1.0, n_dim=10)
    base.update(kw)
    return ModelParams(**base)


class TestUndetectedBranch:
    def test_labeled_only_is_ridge_regression(self):
        # without unlabeled data the effective variance is exactly 1/lam
        for lam in (0.5, 1.0, 5.0):
            p = make_params(lam=lam, alpha_u=0.0)
            assert ph.chi_undetected_branch(p) == pytest.approx(1.0 / lam,
                                                                rel=1e-14)

    def test_meets_overlap_instability(self):
        # at lam = 5, alpha_u = 3 the branch lands exactly on chi_UD
        p = make_params(lam=5.0, alpha_u=3.0)
        chi = ph.chi_undetected_branch(p)
        assert chi == pytest.approx(0.25, rel=1e-12)
        assert chi == pytest.approx(ph.critical_chi_u_d(p), rel=1e-12)

    def test_consistent_with_lambda_map(self):
        # the root must reproduce lam through the trivial-branch map
        for lam, au in [(5.0, 3.0), (4.0, 1.0), (6.0, 2.0)]:
            p = make_params(lam=lam, alpha_u=au)
            chi = ph.chi_undetected_branch(p)
            op = se.OrderParams.make(chi, 0.0, 0.0, p.lambda0)
            assert se.lambda_from_chi(p, chi, op) == pytest.approx(lam,
                                                                   abs=1e-10)

    def test_stable_side(self):
        # the physical root sits at or below the variance instability
        for lam, au in [(5.0, 3.0), (4.0, 1.0), (3.5, 1.2)]:
            p = make_params(lam=lam, alpha_u=au)
            assert ph.chi_undetected_branch(p) <= ph.critical_chi_u_r(p) + 1e-12

    def test_existence_edge_touches_u_r(self):
        # double root of the quadratic at lam s2 = 1 + 2 sqrt(alpha_u)
        p = make_params(lam=3.0, alpha_u=1.0)
        chi = ph.chi_undetected_branch(p)
        assert chi == pytest.approx(0.5, rel=1e-12)
        assert chi == pytest.approx(ph.critical_chi_u_r(p), rel=1e-12)

    def test_absent_below_existence_region(self):
        with pytest.raises(ValueError, match="undetected solution absent"):
            ph.chi_undetected_branch(make_params(lam=2.0, alpha_u=3.0))

    def test_scales_with_sigma2(self):
        p1 = make_params(lam=5.0, alpha_u=3.0)
        p2 = make_params(lam=2.5, lambda0=0.5, sigma2=2.0, alpha_u=3.0)
        assert ph.chi_undetected_branch(p2) == pytest.approx(
            2.0 * ph.chi_undetected_branch(p1), rel=1e-12)


class TestCriticalChi:
    def test_closed_forms(self):
        p = make_params(alpha_u=4.0)
        assert ph.critical_chi_u_r(p) == pytest.approx(1.0 / 3.0, rel=1e-14)
        assert ph.critical_chi_u_d(p) == pytest.approx(0.2, rel=1e-14)
        assert ph.critical_chi_u_r(p, mode="bayes") == pytest.approx(0.5)
        assert ph.critical_chi_u_d(p, mode="bayes") == pytest.approx(0.25)

    def test_linearizations_are_one_on_boundaries(self):
        for au in (0.5, 1.0, 4.0, 7.0):
            p = make_params(alpha_u=au)
            assert ph.v_linearization(p, ph.critical_chi_u_r(p)) \
                == pytest.approx(1.0, rel=1e-12)
            assert ph.k_linearization(p, ph.critical_chi_u_d(p)) \
                == pytest.approx(1.0, rel=1e-12)

    def test_linearizations_are_one_on_bayes_boundaries(self):
        for au in (0.5, 2.0, 5.0):
            p = make_params(alpha_u=au, estimator_mode="bayes")
            assert ph.v_linearization(p, ph.critical_chi_u_r(p)) \
                == pytest.approx(1.0, rel=1e-12)
            assert ph.k_linearization(p, ph.critical_chi_u_d(p)) \
                == pytest.approx(1.0, rel=1e-12)

    def test_k_linearization_is_one_step_growth(self):
        # the coefficient must match the measured growth of a seed overlap
        for au, chi in [(3.0, 0.2), (3.0, 0.28), (5.0, 0.4)]:
            p = make_params(alpha_u=au)
            op = se.OrderParams.make(chi, 1e-9, 0.0, p.lambda0)
            grown = se.se_step_rmle(op, p, chi).k / 1e-9
            assert grown == pytest.approx(ph.k_linearization(p, chi),
                                          rel=1e-6)

    def test_growth_flips_across_u_d(self):
        p = make_params(alpha_u=3.0)
        chi_c = ph.critical_chi_u_d(p)
        assert ph.k_linearization(p, chi_c - 0.02) < 1.0
        assert ph.k_linearization(p, chi_c + 0.02) > 1.0

    def test_boundaries_cross_at_snr_squared(self):
        # chi_UR = chi_UD exactly at alpha_u = (lambda0 s2)^2, both modes
        for mode in ("rmle", "bayes"):
            for l0, s2 in [(1.0, 1.0), (2.0, 1.0), (0.5, 2.0)]:
                au = (l0 * s2) ** 2
                p = make_params(lambda0=l0, sigma2=s2, alpha_u=au,
                                estimator_mode=mode)
                assert ph.critical_chi_u_r(p, mode=mode) == pytest.approx(
                    ph.critical_chi_u_d(p, mode=mode), rel=1e-12)

    def test_requires_unlabeled_data(self):
        p = make_params(alpha_u=0.0)
        with pytest.raises(ValueError, match="alpha_u"):
            ph.critical_chi_u_r(p)
        with pytest.raises(ValueError, match="alpha_u"):
            ph.critical_chi_u_d(p)


class TestPanelRule:
    @pytest.mark.filterwarnings(
        "ignore::scipy.integrate.IntegrationWarning")
    def test_matches_adaptive_quadrature_near_collapse(self):
        # the core of T at t -> 1 is what fixed Hermite rules misweight
        for t, s, tol in [(0.9, 0.519, 1e-12), (0.9999, 0.05, 1e-8)]:
            rule = ph._panel_rule(t)
            got = float(np.sum(rule.w * pot.t_rmle(s * rule.z, t, 0.5)))

            def dens(z):
                val = pot.t_rmle(np.asarray([s * z]), t, 0.5)[0]
                return val * np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)

            want = 0.0
            for a, b in [(0.0, 1e-5), (1e-5, 1e-2), (1e-2, 9.0)]:
                part, err = quad(dens, a, b, epsabs=1e-13, epsrel=1e-12,
                                 limit=200)
                want += part
            want *= 2.0
            assert abs(got - want) < tol * max(want, 1.0)

    def test_weights_sum_to_one(self):
        for t in (0.2, 0.9, 0.999):
            rule = ph._panel_rule(t)
            assert abs(np.sum(rule.w) - 1.0) < 1e-12


class TestDetectedRandomBoundary:
    def test_roots_in_existence_window(self):
        for au, root in [(1.1, 0.6713668823), (1.2, 0.7975818960)]:
            p = make_params(alpha_u=au)
            chi = ph.detected_random_boundary(p)
            assert chi == pytest.approx(root, abs=2e-8)
            assert ph.critical_chi_u_r(p) < chi < p.sigma2

    def test_emerges_from_triple_point(self):
        # just above alpha_u = (lambda0 s2)^2 the root starts near chi_UR(1)
        p = make_params(alpha_u=1.02)
        chi = ph.detected_random_boundary(p)
        assert chi == pytest.approx(0.5580, abs=2e-4)
        assert abs(chi - 0.5) < 0.08

    def test_no_crossing_outside_window(self):
        # born stable below the window, born unstable and staying so above
        for au in (0.5, 3.0):
            with pytest.raises(ValueError, match="no detected-random"):
                ph.detected_random_boundary(make_params(alpha_u=au), scan=41)

    def test_quadrature_resolution_stable(self):
        p = make_params(alpha_u=1.2)
        c24 = ph.detected_random_boundary(p, points=24)
        c48 = ph.detected_random_boundary(p, points=48)
        assert abs(c24 - c48) < 1e-8

    def test_window_scales_with_snr(self):
        # at lambda0 s2 = 2 the window opens at alpha_u = 4
        p = make_params(lambda0=2.0, alpha_u=4.4)
        chi = ph.detected_random_boundary(p)
        assert ph.critical_chi_u_r(p) < chi < p.sigma2
        assert chi == pytest.approx(0.4844268247, abs=2e-8)

    def test_random_branch_variance_positive_past_u_r(self):
        p = make_params(alpha_u=1.2)
        chi_c = ph.critical_chi_u_r(p)
        assert ph.random_branch_v(p, chi_c + 0.1) > 1e-4
        assert ph.random_branch_v(p, chi_c - 0.05) == pytest.approx(0.0,
                                                                    abs=1e-8)

    def test_random_branch_requires_symmetric_unlabeled(self):
        with pytest.raises(ValueError):
            ph.random_branch_v(make_params(alpha_u=1.2, rho=0.4), 0.7)
        with pytest.raises(ValueError):
            ph.random_branch_v(make_params(alpha_u=1.2, alpha_l=0.3), 0.7)


class TestAtInstability:
    def test_reduces_to_v_linearization_at_trivial_point(self):
        for au, chi in [(1.0, 0.3), (6.0, 0.3), (2.0, 0.7), (4.0, 0.55)]:
            p = make_params(alpha_u=au)
            triv = se.OrderParams.make(chi, 0.0, 0.0, p.lambda0)
            assert ph.at_instability(p, chi, triv) == pytest.approx(
                ph.v_linearization(p, chi), rel=1e-10)

    def test_trivial_point_closed_form(self):
        # alpha_u chi^2 / (1 - chi)^2 at unit sigma2
        p = make_params(alpha_u=6.0)
        triv = se.OrderParams.make(0.3, 0.0, 0.0, p.lambda0)
        got = ph.at_instability(p, 0.3, triv)
        assert got == pytest.approx(6.0 * 0.09 / 0.49, rel=1e-12)
        assert got > 1.0

    def test_detected_point_is_stable_there(self):
        # the strong k-instability at (0.3, 6) lands the recursion on a
        # detected fixed point whose stability integral is well below one
        p = make_params(alpha_u=6.0)
        res = se.se_fixed_point(p, 0.3, init="informed")
        at = ph.at_instability(p, 0.3, res.op)
        assert res.op.k > 0.9
        assert at < 0.3

    def test_bayes_trivial_reduction(self):
        for au, chi in [(2.0, 0.4), (1.0, 1.2)]:
            p = make_params(alpha_u=au, estimator_mode="bayes")
            triv = se.OrderParams.make(chi, 0.0, 0.0, p.lambda0)
            assert ph.at_instability(p, chi, triv) == pytest.approx(
                ph.v_linearization(p, chi), rel=1e-10)

    def test_custom_rule_override(self):
        p = make_params(alpha_u=2.0)
        fp = se.OrderParams.make(0.4, 0.3, 0.2, p.lambda0)
        default = ph.at_instability(p, 0.4, fp)
        fine = ph.at_instability(p, 0.4, fp, rule=ph._panel_rule(0.4, 48))
        assert default == pytest.approx(fine, rel=1e-10)


class TestClassifyPhase:
    def test_undetected_point(self):
        r = ph.classify_phase(make_params(alpha_u=1.0), 0.3)
        assert r.phase == "undetected"
        assert abs(r.k_star) < 1e-5 and abs(r.v_star) < 1e-5
        assert r.k_lin < 1.0 and r.v_lin < 1.0
        assert r.k_lin == pytest.approx(3.0 / 7.0, rel=1e-12)

    def test_detected_point(self):
        r = ph.classify_phase(make_params(alpha_u=5.0), 0.3)
        assert r.phase == "detected"
        assert r.k_lin == pytest.approx(15.0 / 7.0, rel=1e-12)
        assert r.k_star > 0.5
        assert r.at_integral < 1.0

    def test_labeled_data_removes_undetected(self):
        r = ph.classify_phase(make_params(alpha_u=1.0, alpha_l=0.1), 0.3)
        assert r.phase == "detected"
        assert r.k_star > 0.01

    def test_no_unlabeled_data(self):
        r = ph.classify_phase(make_params(alpha_u=0.0), 0.3)
        assert r.phase == "undetected"
        assert np.isnan(r.boundary_distances["chi_minus_u_r"])

    def test_singular_ridge(self):
        r = ph.classify_phase(make_params(alpha_u=3.0), 1.0)
        assert r.phase == "indeterminate"
        assert r.sub_phase == "singular"
        assert not r.converged

    def test_random_region_labeled_rsb(self):
        # small alpha_u, chi past the variance instability: zero overlap
        r = ph.classify_phase(make_params(alpha_u=0.8), 0.8)
        assert r.phase == "rsb"
        assert abs(r.k_star) < 1e-5
        assert r.v_star > 1e-3

    def test_rsb_band_near_collapse(self):
        # the stability integral blows up as (1 - t)^{-1/2} at fixed k*
        r = ph.classify_phase(make_params(alpha_u=6.0), 0.95)
        assert r.phase == "rsb"
        assert r.at_integral >= 1.0

    def test_report_structure(self):
        r = ph.classify_phase(make_params(alpha_u=5.0), 0.3)
        assert r.point == (0.3, 5.0, 0.0, 0.5, 1.0, 1.0, "rmle")
        assert set(r.stability) == {"k_lin", "v_lin", "at_integral"}
        assert set(r.boundary_distances) == {"chi_minus_u_r",
                                             "chi_minus_u_d",
                                             "at_minus_one"}
        assert r.boundary_distances["chi_minus_u_d"] == pytest.approx(
            0.3 - 1.0 / 6.0, rel=1e-12)

    def test_snr_rescaling_invariance(self):
        # (s2, lambda0) -> (c s2, lambda0/c) with chi -> c chi relabels
        # nothing; overlap is invariant and the variance carries the scale
        r1 = ph.classify_phase(make_params(alpha_u=5.0), 0.3)
        r2 = ph.classify_phase(make_params(alpha_u=5.0, sigma2=2.0,
                                           lambda0=0.5), 0.6)
        assert r1.phase == r2.phase == "detected"
        assert r2.k_star == pytest.approx(r1.k_star, rel=1e-8)
        assert r2.v_star == pytest.approx(2.0 * r1.v_star, rel=1e-8)
        assert r2.at_integral == pytest.approx(r1.at_integral, rel=1e-8)

    def test_region_invariants_on_sample(self):
        pts = [(0.15, 2.0), (0.3, 3.0), (0.45, 6.0), (0.7, 1.5),
               (0.85, 4.0), (0.6, 0.5)]
        for chi, au in pts:
            r = ph.classify_phase(make_params(alpha_u=au), chi)
            if r.phase == "undetected":
                assert r.k_lin < 1.0 and r.v_lin < 1.0
                assert abs(r.k_star) < 1e-5 and abs(r.v_star) < 1e-5
            elif r.phase == "detected":
                assert r.at_integral < 1.0
                assert r.k_star > 1e-5
            elif r.phase == "rsb":
                assert r.at_integral >= 1.0 or abs(r.k_star) < 1e-5


class TestHeatmapBoundary:
    def test_matched_posterior_mean(self):
        assert ph.bo_heatmap_boundary(make_params(estimator_mode="bayes")) \
            == pytest.approx(1.0, rel=1e-14)
        p = make_params(lambda0=2.0, estimator_mode="bayes")
        assert ph.bo_heatmap_boundary(p) == pytest.approx(4.0, rel=1e-14)

    def test_zero_temperature(self):
        assert ph.bo_heatmap_boundary(make_params(lam=2.5)) \
            == pytest.approx(0.5, rel=1e-14)
        assert ph.bo_heatmap_boundary(make_params(lam=3.0)) \
            == pytest.approx(1.0, rel=1e-14)

    def test_unphysical_raises(self):
        with pytest.raises(ValueError, match="-0.8"):
            ph.bo_heatmap_boundary(make_params(lam=1.2))

    def test_matches_undetected_branch_tangency(self):
        # the rmle boundary is where chi(lam) meets the overlap instability
        p = make_params(lam=5.0)
        au = ph.bo_heatmap_boundary(p)
        p_au = make_params(lam=5.0, alpha_u=au)
        assert ph.chi_undetected_branch(p_au) == pytest.approx(
            ph.critical_chi_u_d(p_au), rel=1e-10)


class TestNishimoriLine:
    def setup_method(self):
        self.grid = np.geomspace(0.05, 3.0, 61)

    def test_trivial_segment_is_inverse_snr(self):
        # the matched trivial branch has lambda(chi) = 1/chi identically
        p = make_params(estimator_mode="bayes", lam=1.0, lambda0=1.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            line = ph.nishimori_line(p, [0.0, 0.5, 0.8],
                                     chi_grid=self.grid)
        for _, chi in line:
            assert chi == pytest.approx(1.0, abs=1e-6)

    def test_detected_segment_past_crossing(self):
        p = make_params(estimator_mode="bayes", lam=1.0, lambda0=1.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            line = ph.nishimori_line(p, [1.3, 2.0, 4.0], chi_grid=self.grid)
        chis = dict(line)
        assert chis[1.3] == pytest.approx(0.865766, abs=1e-4)
        assert chis[2.0] == pytest.approx(0.652765, abs=1e-4)
        assert chis[4.0] == pytest.approx(0.380518, abs=1e-4)

    def test_crossing_at_inverse_snr_squared(self):
        # the line meets chi_UD exactly where the detected phase opens
        p = make_params(estimator_mode="bayes", lam=1.0, lambda0=1.0,
                        alpha_u=1.0)
        assert ph.critical_chi_u_d(p, mode="bayes") == pytest.approx(1.0)
        assert ph.bo_heatmap_boundary(p) == pytest.approx(1.0)

    def test_at_stable_along_line(self):
        p = make_params(estimator_mode="bayes", lam=1.0, lambda0=1.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            line = ph.nishimori_line(p, [0.5, 1.5, 3.0], chi_grid=self.grid)
        for au, chi in line:
            pp = make_params(estimator_mode="bayes", lam=1.0, alpha_u=au)
            res = se.se_fixed_point(pp, chi, init="informed")
            assert ph.at_instability(pp, chi, res.op) < 1.0

    def test_requires_matched_bayes(self):
        with pytest.raises(ValueError):
            ph.nishimori_line(make_params(), [1.0])
        p = make_params(estimator_mode="bayes", lam=2.0, lambda0=1.0)
        with pytest.raises(ValueError):
            ph.nishimori_line(p, [1.0])


class TestMismatchedStability:
    def test_rsb_interval_below_matched_penalty(self):
        # under-regularized posterior mean: zero-overlap branch with a
        # stability integral above one
        p = make_params(estimator_mode="bayes", lam=0.5, alpha_u=1.0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            chi = se.chi_from_lambda(p, 0.5, branch="informed")
        res = se.se_fixed_point(p, chi, init="informed")
        at = ph.at_instability(p, chi, res.op)
        assert abs(res.op.k) < 1e-5
        assert at > 1.0

    def test_stable_above_matched_penalty(self):
        for au in (2.0, 4.0):
            p = make_params(estimator_mode="bayes", lam=1.2, alpha_u=au)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                chi = se.chi_from_lambda(p, 1.2, branch="informed")
            res = se.se_fixed_point(p, chi, init="informed")
            assert ph.at_instability(p, chi, res.op) < 1.0
            assert res.op.k > 0.2
