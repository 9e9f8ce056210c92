"""Phase taxonomy of the fixed-chi recursion in the (chi, alpha_u) plane.

At fixed chi the order-parameter map has up to three attractors: the
trivial point k = v = 0 (no information extracted from the unlabeled
pool), a random branch with v > 0 but k = 0 (the estimator locks onto a
spurious direction), and a detected branch with k > 0.  This module
provides the closed-form instability boundaries of the trivial point,
the numerically located detected/random boundary, the replica-symmetry
breaking (dynamical instability) integral, and a per-point classifier
that bundles everything into one report.

Conventions shared with state_evolution: T denotes the zero-temperature
second moment T(p, t) and T-tilde the posterior-mean one; the Gaussian
mixture measure puts weight rho on the +w0 cluster.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import potentials as pot
from .state_evolution import (GaussHermite, _phase_tag, _pick_gh,
                              build_lambda_chi_table, chi_from_lambda,
                              LambdaRangeError, OrderParams, se_fixed_point)

_PHASE_TOL = 1e-5
_RANDOM_BRANCH_INIT = (0.0, 1.0)


def _require_unlabeled(params):
    if params.alpha_u <= 0.0:
        raise ValueError("the boundary needs unlabeled data (alpha_u > 0)")


def _t_at_zero(params, chi):
    """Second moment of the estimator nonlinearity at zero field."""
    if params.estimator_mode == "rmle":
        return float(np.asarray(pot.t_rmle(np.asarray([0.0]),
                                           chi / params.sigma2,
                                           params.rho))[0])
    return float(pot.t_tilde(0.0, params.rho))


def k_linearization(params, chi):
    """Growth factor of an infinitesimal overlap k at the trivial point.

    Values above one mean the trivial point is unstable toward the
    detected branch.  The coefficient is meaningful as a stability
    indicator at rho = 1/2 and alpha_l = 0, where (0, 0) is a fixed
    point; elsewhere it is reported as a diagnostic only.
    """
    t0 = _t_at_zero(params, chi)
    return params.alpha_u * chi * t0 / (params.lambda0 * params.sigma2 ** 2)


def v_linearization(params, chi):
    """Growth factor of an infinitesimal variance v at the trivial point."""
    t0 = _t_at_zero(params, chi)
    return params.alpha_u * (chi * t0 / params.sigma2) ** 2


def chi_undetected_branch(params):
    """chi of the trivial solution at regularization strength params.lam.

    Eliminating the fixed point from the trivial-branch lambda(chi)
    relation leaves the quadratic

        (alpha_u/s2 + lam) chi^2 - (1 + lam s2) chi + s2 = 0,

    and the root on the stable side (chi below the variance-instability
    point s2/(1+sqrt(alpha_u)), equivalently the plus branch of the
    same quadratic solved for 1/chi) is the one connected to the pure
    ridge value 1/lam as alpha_u -> 0 throughout the existence region.
    The other root lies beyond the instability and never marks a
    boundary.  Raises ValueError when no trivial solution exists at
    this lam (negative discriminant).
    """
    lam, s2 = params.lam, params.sigma2
    if params.alpha_u == 0.0:
        # the quadratic factors as (lam chi - 1)(chi - s2); the s2 root
        # is an artifact of clearing the alpha_u/(s2 - chi) denominator
        return 1.0 / lam
    b = 1.0 + lam * s2
    disc = (1.0 - lam * s2) ** 2 - 4.0 * params.alpha_u
    if disc < 0.0:
        raise ValueError(
            "undetected solution absent at lam=%g, alpha_u=%g "
            "(discriminant %g < 0)" % (lam, params.alpha_u, disc))
    return 2.0 * s2 / (b + np.sqrt(disc))


def critical_chi_u_r(params, mode=None):
    """chi where the trivial point loses stability in the variance.

    Solves v_linearization(chi) = 1 in closed form; beyond it the
    random branch detaches from the trivial point.
    """
    _require_unlabeled(params)
    mode = mode or params.estimator_mode
    s2 = params.sigma2
    if mode == "rmle":
        return s2 / (1.0 + np.sqrt(params.alpha_u))
    return s2 / np.sqrt(params.alpha_u)


def critical_chi_u_d(params, mode=None):
    """chi where the trivial point loses stability in the overlap.

    Solves k_linearization(chi) = 1 in closed form; beyond it an
    infinitesimal alignment with the cluster axis is amplified.
    """
    _require_unlabeled(params)
    mode = mode or params.estimator_mode
    s2, l0 = params.sigma2, params.lambda0
    if mode == "rmle":
        return s2 / (1.0 + params.alpha_u / (l0 * s2))
    return s2 ** 2 * l0 / params.alpha_u


def _second_moment_mixture(params, chi, mean, sd, gh, square):
    """Int Dz of the mixture-averaged T (or T^2) at the given field law."""
    p_arg = mean + sd * gh.z
    q_arg = -mean + sd * gh.z
    if params.estimator_mode == "rmle":
        _, tv = pot.f_t_rmle(np.concatenate([p_arg, q_arg]),
                             chi / params.sigma2, params.rho)
        t_p, t_q = tv[:gh.z.size], tv[gh.z.size:]
    else:
        t_p = pot.t_tilde(p_arg, params.rho)
        t_q = pot.t_tilde(q_arg, params.rho)
    if square:
        t_p, t_q = t_p ** 2, t_q ** 2
    rho = params.rho
    return float(np.sum(gh.w * (rho * t_p + (1.0 - rho) * t_q)))


_GL_CACHE = {}


def _panel_rule(t, points=24, z_max=9.0):
    """Composite Gauss-Legendre rule for Int Dz, refined around z = 0.

    Approaching t = 1 the zero-temperature T develops a Lorentzian core
    of width (1 - t)^{3/2} in its field argument; fixed Gauss-Hermite
    rules overweight it by orders of magnitude once the core falls
    between nodes.  Panels shrink geometrically toward the origin so
    the innermost ones resolve the core, and each panel is integrated
    spectrally.  Returned in the same (z, w) container the recursion
    consumes, with the Gaussian density folded into the weights.
    """
    key = int(points)
    if key not in _GL_CACHE:
        _GL_CACHE[key] = np.polynomial.legendre.leggauss(key)
    u, w = _GL_CACHE[key]
    inner = max(((1.0 - t) ** 1.5 if t < 1.0 else 0.0) / 12.0, 1e-8)
    edges = [0.0, inner]
    while edges[-1] < z_max:
        edges.append(min(edges[-1] * 2.0, z_max))
    z_parts, w_parts = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        half = 0.5 * (b - a)
        z_parts.append(0.5 * (a + b) + half * u)
        w_parts.append(half * w)
    z = np.concatenate(z_parts)
    wt = np.concatenate(w_parts)
    z = np.concatenate([-z[::-1], z])
    wt = np.concatenate([wt[::-1], wt])
    wt = wt * np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    return GaussHermite(z=z, w=wt)


def at_instability(params, chi, fixed_point, rule=None):
    """Dynamical-stability integral I at a converged fixed point.

    I = (alpha_u chi^2 / s2^2) Int Dz [rho T^2(P) + (1-rho) T^2(Q)]
    with the fields P, Q drawn from the fixed point's mixture law.
    I >= 1 flags replica symmetry breaking and message-passing
    divergence.  At the trivial point the integral collapses to the
    variance linearization coefficient.

    The zero-temperature integrand needs the core-refined rule (its
    default); a (z, w) container passed as rule overrides it.
    """
    if rule is None:
        if params.estimator_mode == "rmle":
            rule = _panel_rule(chi / params.sigma2)
        else:
            rule = _pick_gh(params.estimator_mode, chi / params.sigma2, None)
    mean = fixed_point.k / (params.lambda0 * params.sigma2)
    sd = np.sqrt(fixed_point.v_tilde / params.sigma2)
    i2 = _second_moment_mixture(params, chi, mean, sd, rule, square=True)
    return params.alpha_u * chi ** 2 / params.sigma2 ** 2 * i2


def random_branch_v(params, chi, eps=1e-10, gh=None):
    """Variance of the k = 0 branch at fixed chi.

    Only defined in the symmetric label-free setting, where the
    recursion preserves k = 0 exactly.  Returns 0 below the variance
    instability.
    """
    if params.rho != 0.5 or params.alpha_l != 0.0:
        raise ValueError("the zero-overlap branch needs rho = 1/2 and "
                         "alpha_l = 0")
    res = se_fixed_point(params, chi, init=_RANDOM_BRANCH_INIT, eps=eps,
                         max_iter=20000, gh=gh)
    if not res.converged:
        if res.op.v < 1e-6:
            # crawling toward the degenerate limit at the variance
            # instability, where the branch merges with the trivial point
            return 0.0
        raise RuntimeError("zero-overlap branch did not converge at "
                           "chi=%g" % chi)
    return res.op.v


def _k_gain_on_random_branch(params, chi, gh):
    """Growth factor of an infinitesimal k on top of the random branch."""
    v_star = random_branch_v(params, chi, gh=gh)
    sd = np.sqrt(v_star / params.sigma2)
    i_t = _second_moment_mixture(params, chi, 0.0, sd, gh, square=False)
    return params.alpha_u * chi * i_t / (params.lambda0 * params.sigma2 ** 2)


def detected_random_boundary(params, lo=None, hi=None, tol=1e-8,
                             points=24, scan=81):
    """chi where the random branch loses stability toward detection.

    Solves 1 = (alpha_u chi / (lambda0 s2^2)) Int Dz T(sqrt(v*/s2) z)
    with v* the random-branch variance at that chi, by a scan plus
    bisection to the requested chi tolerance.  As v* -> 0 the condition
    reduces to the trivial-point overlap instability; the crossing only
    exists in a window of alpha_u just above the triple point
    (lambda0 s2)^2, where the zero-overlap branch is born unstable and
    restabilizes at larger chi.  The value is an approximation anyway:
    replica symmetry is already broken in the random region, so the
    line is an RS-level estimate there.

    points sets the per-panel order of the core-refined quadrature used
    for both the branch variance and the gain integral.
    """
    chi_ur = critical_chi_u_r(params)
    if lo is None:
        lo = chi_ur
    if hi is None:
        # stay clear of chi = s2: the core of T collapses faster than
        # float refinement can follow on the last 1e-4 of the ridge
        hi = params.sigma2 * (1.0 - 1e-4)

    def gain(c):
        if c <= chi_ur:
            # at the branch birth v* = 0 and the gain limit is the
            # trivial-point overlap coefficient, known in closed form
            return k_linearization(params, c) - 1.0
        rule = _panel_rule(c / params.sigma2, points=points)
        return _k_gain_on_random_branch(params, c, rule) - 1.0

    grid = np.linspace(lo, hi, scan)
    gains = [gain(c) for c in grid]
    bracket = None
    for i in range(len(grid) - 1):
        if gains[i] == 0.0:
            return float(grid[i])
        if gains[i] * gains[i + 1] < 0.0:
            bracket = (grid[i], grid[i + 1], gains[i])
            break
    if bracket is None:
        raise ValueError("no detected-random crossing on (%g, %g); the "
                         "random branch keeps one stability type there"
                         % (lo, hi))
    c_lo, c_hi, g_lo = bracket
    while c_hi - c_lo > tol:
        c_mid = 0.5 * (c_lo + c_hi)
        g_mid = gain(c_mid)
        if (g_mid < 0.0) == (g_lo < 0.0):
            c_lo, g_lo = c_mid, g_mid
        else:
            c_hi = c_mid
    return 0.5 * (c_lo + c_hi)


@dataclass(frozen=True)
class PhaseReport:
    """Full classification record of one (params, chi) point."""
    chi: float
    alpha_u: float
    alpha_l: float
    rho: float
    lambda0: float
    sigma2: float
    mode: str
    phase: str
    k_star: float
    v_star: float
    k_lin: float
    v_lin: float
    at_integral: float
    sub_phase: str
    converged: bool
    boundary_distances: dict

    @property
    def point(self):
        return (self.chi, self.alpha_u, self.alpha_l, self.rho,
                self.lambda0, self.sigma2, self.mode)

    @property
    def stability(self):
        return {"k_lin": self.k_lin, "v_lin": self.v_lin,
                "at_integral": self.at_integral}


def _boundary_distances(params, chi, at_val):
    try:
        d_ur = chi - critical_chi_u_r(params)
        d_ud = chi - critical_chi_u_d(params)
    except ValueError:
        d_ur = d_ud = np.nan
    return {"chi_minus_u_r": d_ur, "chi_minus_u_d": d_ud,
            "at_minus_one": at_val - 1.0}


def _report(params, chi, phase, k_star, v_star, k_lin, v_lin, at_val,
            sub_phase, converged):
    return PhaseReport(
        chi=float(chi), alpha_u=params.alpha_u, alpha_l=params.alpha_l,
        rho=params.rho, lambda0=params.lambda0, sigma2=params.sigma2,
        mode=params.estimator_mode, phase=phase, k_star=float(k_star),
        v_star=float(v_star), k_lin=float(k_lin), v_lin=float(v_lin),
        at_integral=float(at_val), sub_phase=sub_phase,
        converged=bool(converged),
        boundary_distances=_boundary_distances(params, chi, at_val))


def classify_phase(params, chi, tol=_PHASE_TOL, eps=1e-8):
    """Classify one point of the (chi, alpha_u) plane.

    Runs the recursion from the uninformed and the informed starting
    points, evaluates the trivial-point linearization coefficients and
    the dynamical-stability integral at the reached fixed point, then
    assigns one of "undetected", "detected" or "rsb".  The random and
    mixed regions are merged into "rsb" in the phase label; the raw
    sub-diagnosis of the reached fixed point stays in sub_phase.
    Non-convergence and the degenerate ridge chi = s2 of the
    zero-temperature nonlinearity yield "indeterminate".
    """
    if (params.estimator_mode == "rmle"
            and abs(chi - params.sigma2) < 1e-12 * params.sigma2):
        # on the ridge chi = s2 the field average of T^2 is not
        # integrable, so the stability report cannot be evaluated
        return _report(params, chi, "indeterminate", np.nan, np.nan,
                       np.inf, np.inf, np.nan, "singular", False)
    try:
        k_lin = k_linearization(params, chi)
        v_lin = v_linearization(params, chi)
    except pot.PotentialSingularityError:
        k_lin = v_lin = np.inf
    try:
        res_u = se_fixed_point(params, chi, init="uninformed", eps=eps)
        res_i = se_fixed_point(params, chi, init="informed", eps=eps)
        sel = res_i.op
        at_val = at_instability(params, chi, sel)
    except pot.PotentialSingularityError:
        return _report(params, chi, "indeterminate", np.nan, np.nan,
                       k_lin, v_lin, np.nan, "singular", False)
    tag_u = _phase_tag(res_u.op.k, res_u.op.v, tol)
    tag_i = _phase_tag(sel.k, sel.v, tol)
    converged = res_u.converged and res_i.converged
    if not converged:
        phase, sub = "indeterminate", "nonconverged"
    elif tag_u == "trivial" and tag_i == "trivial":
        sub = "trivial"
        if k_lin < 1.0 and v_lin < 1.0:
            phase = "undetected"
        else:
            # reached the trivial point although a linearization is at
            # or beyond marginality: a boundary ridge, not a region
            phase = "indeterminate"
    elif at_val >= 1.0:
        phase, sub = "rsb", tag_i
    elif tag_i == "detected":
        phase, sub = "detected", tag_i
    else:
        # stable zero-overlap branch: merged into the RSB region in the
        # coarse taxonomy
        phase, sub = "rsb", tag_i
    return _report(params, chi, phase, sel.k, sel.v, k_lin, v_lin,
                   at_val, sub, converged)


def bo_heatmap_boundary(params, mode=None):
    """alpha_u at which the detected phase opens in the SNR heatmap.

    Posterior-mean matched case: alpha_u = SNR^{-2}.  Zero-temperature
    case: alpha_u = ((lam - lambda0) s2 - 1) lambda0 s2, from the
    crossing of the trivial-branch chi(lam) with the overlap
    instability.  Raises ValueError when the crossing lies outside the
    physical region alpha_u >= 0.
    """
    mode = mode or params.estimator_mode
    s2, l0 = params.sigma2, params.lambda0
    if mode == "bayes":
        out = (l0 * s2) ** 2
    else:
        out = ((params.lam - l0) * s2 - 1.0) * l0 * s2
    if out < 0.0:
        raise ValueError("boundary outside the physical region "
                         "(alpha_u = %g < 0)" % out)
    return out


def nishimori_line(params, alpha_u_grid, chi_grid=None, eps=1e-8):
    """Locus of the matched posterior-mean estimator in the chi plane.

    For each alpha_u, inverts lambda(chi) = lambda0 along the branch
    that is actually reachable (uninformed first, informed as the
    fallback) and returns the list of (alpha_u, chi) pairs.  Requires
    the posterior-mean mode with lam = lambda0.
    """
    if params.estimator_mode != "bayes":
        raise ValueError("the matched line is defined for the "
                         "posterior-mean estimator")
    if params.lam != params.lambda0:
        raise ValueError("matched estimation needs lam = lambda0")
    out = []
    for alpha_u in np.asarray(alpha_u_grid, dtype=float):
        p = dataclasses.replace(params, alpha_u=float(alpha_u))
        chi = None
        last_err = None
        for branch in ("uninformed", "informed"):
            try:
                table = build_lambda_chi_table(p, branch=branch,
                                               chi_grid=chi_grid, eps=eps)
                chi = chi_from_lambda(p, p.lambda0, branch=branch,
                                      table=table, eps=eps)
                break
            except LambdaRangeError as err:
                last_err = err
        if chi is None:
            raise last_err
        out.append((float(alpha_u), float(chi)))
    return out
