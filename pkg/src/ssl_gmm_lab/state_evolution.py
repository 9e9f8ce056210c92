"""Scalar state evolution for both estimators under a fixed chi.

Tracks the overlap k and variance v of the estimator against the true
center through the two-moment recursions

    k' = chi * (alpha_l/s2 + (alpha_u/s2) * Int Dz [rho F(P) - (1-rho) F(Q)])
    v' = chi**2 * (alpha_l/s2 + (alpha_u/s2) * Int Dz [rho F(P)**2 + (1-rho) F(Q)**2])

with P = k/(lambda0 s2) + sqrt(v_tilde/s2) z, Q the mirrored mean, and
v_tilde = k**2/lambda0 + v. The zero-temperature mode uses F(., chi/s2)
from the maximized envelope, the posterior-mean mode uses f_tilde. The
regularization lambda is recovered from a converged solution through the
stationarity of chi itself.
"""

from __future__ import annotations

import hashlib
import os
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import roots_hermite

from . import potentials as pot

UNINFORMED_INIT = (1e-6, 1e-6)
INFORMED_INIT = (1.0, 0.0)

_BRANCH_INITS = {"uninformed": UNINFORMED_INIT, "informed": INFORMED_INIT}

# in-process fallback for lambda-chi tables when no cache dir is configured
_TABLE_CACHE = {}
_CACHE_ENV = "SSL_GMM_LAB_CACHE"


class LambdaRangeError(ValueError):
    """Requested lambda is not bracketed by the lambda-chi table.

    When bisection stalls on a jump of the lambda(chi) map, ``chi`` and
    ``residual`` record the stall point so callers can decide whether the
    requested lambda sits on a phase boundary.
    """

    def __init__(self, message, chi=None, residual=None):
        super().__init__(message)
        self.chi = chi
        self.residual = residual


class NonMonotoneLambdaWarning(UserWarning):
    """The lambda-chi correspondence is not one-to-one on this table."""


@dataclass(frozen=True)
class GaussHermite:
    """Gauss-Hermite rule rescaled to the unit Gaussian measure Dz."""
    z: np.ndarray
    w: np.ndarray

    @classmethod
    def make(cls, n):
        # scipy's rule stays finite at high node counts where the numpy
        # recurrence overflows
        u, w = roots_hermite(n)
        z = np.sqrt(2.0) * u
        w = w / np.sqrt(np.pi)
        z.setflags(write=False)
        w.setflags(write=False)
        return cls(z=z, w=w)


_GH_DEFAULT_NODES = 201
_GH = GaussHermite.make(_GH_DEFAULT_NODES)
_GH_FINE = None
# zero-temperature F steepens like 1/(1 - t) approaching t = 1 and is
# piecewise beyond it, which starves a 201-node rule; inside this band the
# denser rule below is used instead (the posterior-mean nonlinearity stays
# smooth at every t and never needs it)
_SHARP_BAND = (0.8, 1.3)
_GH_FINE_NODES = 1001


def _fine_gh():
    global _GH_FINE
    if _GH_FINE is None:
        _GH_FINE = GaussHermite.make(_GH_FINE_NODES)
    return _GH_FINE


def _pick_gh(mode, t, gh):
    if gh is not None:
        return gh
    if mode == "rmle" and _SHARP_BAND[0] < t < _SHARP_BAND[1]:
        return _fine_gh()
    return _GH


def gauss_integral(f, nodes=_GH_DEFAULT_NODES):
    """Int Dz f(z) with Dz the standard normal measure."""
    gh = _GH if nodes == _GH_DEFAULT_NODES else GaussHermite.make(nodes)
    return float(np.sum(gh.w * f(gh.z)))


def quadrature_self_check(rho=0.5, chi=0.3):
    """Compare the default rule against a 10x refined one on live integrands.

    Returns the worst relative deviation over representative smooth
    mixture integrands; used as a startup sanity check.
    """
    worst = 0.0
    cases = [lambda z: pot.t_tilde(0.3 + 0.8 * z, rho),
             lambda z: pot.f_tilde(0.4 + 1.1 * z, rho) ** 2,
             lambda z: pot.f_rmle(0.0 + 0.6 * z, chi, rho) ** 2]
    for integrand in cases:
        a = gauss_integral(integrand)
        b = gauss_integral(integrand, nodes=10 * _GH_DEFAULT_NODES + 1)
        worst = max(worst, abs(a - b) / max(abs(b), 1e-300))
    return worst


@dataclass(frozen=True)
class OrderParams:
    """One point of the SE trajectory at fixed chi."""
    chi: float
    k: float
    v: float
    v_tilde: float
    iter: int = 0

    @classmethod
    def make(cls, chi, k, v, lambda0, it=0):
        if v < 0.0:
            raise ValueError("v must be nonnegative")
        return cls(chi=float(chi), k=float(k), v=float(v),
                   v_tilde=float(k * k / lambda0 + v), iter=int(it))


def _coerce_init(init, chi, lambda0):
    if init is None:
        init = UNINFORMED_INIT
    if isinstance(init, str):
        init = _BRANCH_INITS[init]
    if isinstance(init, OrderParams):
        return OrderParams.make(chi, init.k, init.v, lambda0, it=init.iter)
    k, v = init
    return OrderParams.make(chi, k, v, lambda0, it=0)


def _mixture_fields(op, params, gh):
    sd = np.sqrt(op.v_tilde / params.sigma2)
    mean = op.k / (params.lambda0 * params.sigma2)
    return mean + sd * gh.z, -mean + sd * gh.z


def _se_step(op, params, chi, mode, gh):
    gh = _pick_gh(mode, chi / params.sigma2, gh)
    p_arg, q_arg = _mixture_fields(op, params, gh)
    if mode == "rmle":
        # one stacked solve covers both mixture components
        f = pot.f_rmle(np.concatenate([p_arg, q_arg]), chi / params.sigma2,
                       params.rho)
        f_p, f_q = f[:gh.z.size], f[gh.z.size:]
    else:
        f_p = pot.f_tilde(p_arg, params.rho)
        f_q = pot.f_tilde(q_arg, params.rho)
    rho = params.rho
    s2 = params.sigma2
    lab = params.alpha_l / s2
    i_k = float(np.sum(gh.w * (rho * f_p - (1.0 - rho) * f_q)))
    i_v = float(np.sum(gh.w * (rho * f_p ** 2 + (1.0 - rho) * f_q ** 2)))
    k_next = chi * (lab + params.alpha_u / s2 * i_k)
    v_next = chi ** 2 * (lab + params.alpha_u / s2 * i_v)
    return OrderParams.make(chi, k_next, v_next, params.lambda0, it=op.iter + 1)


def se_step_rmle(op, params, chi_fixed, gh=None):
    """One zero-temperature SE update at fixed chi."""
    return _se_step(op, params, chi_fixed, "rmle", gh)


def se_step_bayes(op, params, chi_fixed, gh=None):
    """One posterior-mean SE update at fixed chi."""
    return _se_step(op, params, chi_fixed, "bayes", gh)


def se_trajectory(params, chi, init=None, n_steps=25, gh=None):
    """Run exactly n_steps updates, returning every iterate incl. the init."""
    op = _coerce_init(init, chi, params.lambda0)
    mode = params.estimator_mode
    out = [op]
    for _ in range(n_steps):
        op = _se_step(op, params, chi, mode, gh)
        out.append(op)
    return out


@dataclass(frozen=True)
class SEResult:
    """Converged (or truncated) SE fixed point search."""
    op: OrderParams
    converged: bool
    n_iter: int


def se_fixed_point(params, chi, init=None, eps=1e-8, max_iter=5000,
                   damping=0.0, accelerate=True, gh=None):
    """Iterate the SE map at fixed chi until |dk|+|dv| < eps*(1+|k|+|v|).

    Optional damping mixes in the previous iterate; the geometric
    extrapolation fires when successive increments shrink by a steady
    ratio, which lifts the critical slowing down near phase boundaries.
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    op = _coerce_init(init, chi, params.lambda0)
    mode = params.estimator_mode
    dk_prev = dv_prev = None
    for it in range(1, max_iter + 1):
        nxt = _se_step(op, params, chi, mode, gh)
        k_new, v_new = nxt.k, nxt.v
        if damping > 0.0:
            k_new = (1.0 - damping) * k_new + damping * op.k
            v_new = (1.0 - damping) * v_new + damping * op.v
        dk, dv = k_new - op.k, v_new - op.v
        if abs(dk) + abs(dv) < eps * (1.0 + abs(k_new) + abs(v_new)):
            return SEResult(op=OrderParams.make(chi, k_new, v_new,
                                                params.lambda0, it=it),
                            converged=True, n_iter=it)
        if (accelerate and dk_prev is not None and it % 20 == 0
                and abs(dk_prev) + abs(dv_prev) > 0.0):
            rk = dk / dk_prev if dk_prev != 0.0 else 0.0
            rv = dv / dv_prev if dv_prev != 0.0 else 0.0
            # steady geometric decay: jump to the extrapolated limit; a
            # k frozen at exactly zero (symmetric zero-overlap runs)
            # lets v extrapolate alone
            if 0.0 < rk < 0.999 and 0.0 <= rv < 0.999 and abs(rk - rv) < 0.05:
                k_new = k_new + dk * rk / (1.0 - rk)
                if rv > 0.0:
                    v_new = max(v_new + dv * rv / (1.0 - rv), 0.0)
            elif (dk == 0.0 and dk_prev == 0.0 and 0.0 < rv < 1.0 - 1e-7
                  and abs(dv) > 1e-13 * (1.0 + abs(v_new))):
                # the wider ratio window is safe here: near-marginal
                # decay of v alone still halves the distance per jump
                v_new = max(v_new + dv * rv / (1.0 - rv), 0.0)
        dk_prev, dv_prev = dk, dv
        op = OrderParams.make(chi, k_new, v_new, params.lambda0, it=it)
    return SEResult(op=op, converged=False, n_iter=max_iter)


def lambda_from_chi(params, chi, fixed_point, gh=None):
    """Regularization strength consistent with a converged solution at chi.

    lambda = 1/chi - alpha/s2 + (alpha_u/s2) Int Dz [rho T(P) + (1-rho) T(Q)],
    with T from the chosen estimator mode.
    """
    gh = _pick_gh(params.estimator_mode, chi / params.sigma2, gh)
    p_arg, q_arg = _mixture_fields(fixed_point, params, gh)
    if params.estimator_mode == "rmle":
        _, tv = pot.f_t_rmle(np.concatenate([p_arg, q_arg]),
                             chi / params.sigma2, params.rho)
        t_p, t_q = tv[:gh.z.size], tv[gh.z.size:]
    else:
        t_p = pot.t_tilde(p_arg, params.rho)
        t_q = pot.t_tilde(q_arg, params.rho)
    rho = params.rho
    i_t = float(np.sum(gh.w * (rho * t_p + (1.0 - rho) * t_q)))
    return 1.0 / chi - params.alpha / params.sigma2 + \
        params.alpha_u / params.sigma2 * i_t


@dataclass(frozen=True)
class LambdaChiTable:
    """Sampled lambda(chi) correspondence along one SE-init branch."""
    chi: np.ndarray
    lam: np.ndarray
    k_star: np.ndarray
    v_star: np.ndarray
    phase: tuple
    branch: str
    monotone: bool


def _phase_tag(k, v, tol=1e-5):
    if abs(k) < tol and v < tol:
        return "trivial"
    if abs(k) < tol:
        return "random"
    return "detected"


def _solve_row(params, chi, branch, eps, gh=None):
    res = se_fixed_point(params, chi, init=branch, eps=eps, gh=gh)
    try:
        lam = lambda_from_chi(params, chi, res.op, gh=gh)
    except pot.PotentialSingularityError:
        lam = np.nan
    tag = _phase_tag(res.op.k, res.op.v)
    if not res.converged:
        tag = "nonconverged"
    return lam, res.op.k, res.op.v, tag


def _table_key(params, branch, chi_grid, gh=None):
    payload = repr((params.rho, params.lambda0, params.sigma2, params.alpha_l,
                    params.alpha_u, params.estimator_mode, branch,
                    tuple(np.asarray(chi_grid, dtype=float).tolist())))
    if gh is not None:
        payload += repr(gh.z.shape[0])
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _table_to_csv(table, path):
    lines = ["# ssl-gmm-lab lambda-chi table schema=1",
             "chi,lambda,k_star,v_star,phase"]
    for c, l, k, v, ph in zip(table.chi, table.lam, table.k_star,
                              table.v_star, table.phase):
        lines.append("%s,%s,%s,%s,%s" % (repr(float(c)), repr(float(l)),
                                         repr(float(k)), repr(float(v)), ph))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _table_from_csv(path, branch):
    chi, lam, k, v, phase = [], [], [], [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("chi,"):
                continue
            c, l, kk, vv, ph = line.split(",")
            chi.append(float(c))
            lam.append(float(l))
            k.append(float(kk))
            v.append(float(vv))
            phase.append(ph)
    arr = [np.asarray(x, dtype=float) for x in (chi, lam, k, v)]
    return LambdaChiTable(chi=arr[0], lam=arr[1], k_star=arr[2], v_star=arr[3],
                          phase=tuple(phase), branch=branch,
                          monotone=_is_monotone(arr[1]))


def _is_monotone(lam):
    d = np.diff(lam)
    return bool(np.all(d < 0.0) or np.all(d > 0.0))


def build_lambda_chi_table(params, branch="uninformed", chi_grid=None,
                           eps=1e-8, gh=None):
    """Tabulate (chi, lambda, k*, v*) along one branch, dropping lambda <= 0.

    Tables are cached by content: in the directory named by the
    SSL_GMM_LAB_CACHE environment variable when set, else in process memory.
    """
    if branch not in _BRANCH_INITS:
        raise ValueError("branch must be one of %s" % sorted(_BRANCH_INITS))
    if chi_grid is None:
        chi_grid = np.geomspace(1e-3 * params.sigma2, 10.0 * params.sigma2, 241)
    chi_grid = np.asarray(chi_grid, dtype=float)
    key = _table_key(params, branch, chi_grid, gh=gh)
    cache_dir = os.environ.get(_CACHE_ENV, "")
    if cache_dir:
        path = os.path.join(cache_dir, "lambda_chi_%s.csv" % key)
        if os.path.exists(path):
            return _table_from_csv(path, branch)
    elif key in _TABLE_CACHE:
        return _TABLE_CACHE[key]
    rows = []
    for chi in chi_grid:
        lam, k, v, tag = _solve_row(params, float(chi), branch, eps, gh=gh)
        if np.isfinite(lam) and lam > 0.0:
            rows.append((float(chi), lam, k, v, tag))
    if not rows:
        raise LambdaRangeError("no positive-lambda rows on the chi grid")
    chi_a = np.asarray([r[0] for r in rows])
    lam_a = np.asarray([r[1] for r in rows])
    table = LambdaChiTable(
        chi=chi_a, lam=lam_a,
        k_star=np.asarray([r[2] for r in rows]),
        v_star=np.asarray([r[3] for r in rows]),
        phase=tuple(r[4] for r in rows), branch=branch,
        monotone=_is_monotone(lam_a))
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        _table_to_csv(table, path)
    else:
        _TABLE_CACHE[key] = table
    return table


def chi_from_lambda(params, lam, branch="uninformed", table=None, eps=1e-8,
                    tol=1e-8, gh=None):
    """Invert lambda(chi) = lam by bisection over a tabulated bracket.

    Raises LambdaRangeError when the table never brackets lam. A
    non-monotone table triggers NonMonotoneLambdaWarning; among multiple
    roots the informed branch keeps the largest-overlap one and the
    uninformed branch the smallest-overlap one.
    """
    if lam <= 0.0:
        raise ValueError("lambda must be positive")
    if table is None:
        table = build_lambda_chi_table(params, branch=branch, eps=eps, gh=gh)
    g = table.lam - lam

    def _bisect(lo, hi, glo):
        chi_mid = 0.5 * (lo + hi)
        warm = branch
        for _ in range(200):
            chi_mid = 0.5 * (lo + hi)
            res = se_fixed_point(params, chi_mid, init=warm, eps=eps, gh=gh)
            warm = res.op
            gm = lambda_from_chi(params, chi_mid, res.op, gh=gh) - lam
            if abs(gm) < tol or (hi - lo) < 1e-15 * (1.0 + chi_mid):
                break
            if (gm < 0.0) == (glo < 0.0):
                lo = chi_mid
            else:
                hi = chi_mid
        if abs(gm) >= tol:
            raise LambdaRangeError(
                "bisection stalled at chi=%.6g with residual %.3e; the "
                "lambda(chi) map jumps here (phase-transition marker)"
                % (chi_mid, gm), chi=chi_mid, residual=float(gm))
        return chi_mid, float(res.op.k)

    hits = np.where(np.abs(g) <= tol)[0]
    sign_change = np.where(g[:-1] * g[1:] < 0.0)[0]
    candidates = []
    for i in hits:
        candidates.append((float(table.chi[i]), float(table.k_star[i])))
    for i in sign_change:
        candidates.append(_bisect(float(table.chi[i]),
                                  float(table.chi[i + 1]), float(g[i])))
    if not candidates and g[-1] > 0.0:
        # The positive-lambda filter can truncate the table one grid step
        # short of the crossing.  1/chi equals lambda plus nonnegative data
        # terms, so the crossing obeys chi < 1/lam and that closes the
        # bracket from above.
        candidates.append(_bisect(float(table.chi[-1]), 1.0 / lam,
                                  float(g[-1])))
    if not candidates:
        raise LambdaRangeError(
            "lambda=%.6g not bracketed on branch %r" % (lam, branch))
    if len(candidates) > 1:
        if not table.monotone:
            warnings.warn(
                "lambda-chi correspondence is not one-to-one here; "
                "selecting by branch overlap",
                NonMonotoneLambdaWarning, stacklevel=2)
        keyfun = (lambda c: c[1]) if branch == "informed" else (lambda c: -c[1])
        candidates.sort(key=keyfun, reverse=True)
    return candidates[0][0]
