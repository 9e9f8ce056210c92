"""Pointwise nonlinearities for the two-cluster mixture.

``f_tilde`` and ``t_tilde`` are the posterior mean of a hidden +-1 label
seen through a Gaussian channel and its derivative. ``f_rmle`` and
``t_rmle`` are their zero-temperature counterparts, defined through the
scalar envelope

    G(y; p, t) = -y**2 / 2 + log(rho * exp(x) + (1 - rho) * exp(-x)),
    x = p + sqrt(t) * y,

whose maximizer y_star gives F(p, t) = d/dp max_y G and T = dF/dp.
For t <= 1 the envelope is concave in y and the maximizer is unique; for
t > 1 it can split into two competing branches and the higher one wins.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

_EPS = float(np.finfo(float).eps)
_RES_TOL = 1e-12
_DENOM_TOL = 1e-10
_TIE_TOL = 1e-10


class PotentialSingularityError(ArithmeticError):
    """T(p, t) diverges because 1 - t * t_tilde(u_star) collapsed to zero."""


class MaximizerConvergenceError(RuntimeError):
    """The inner maximizer iteration exhausted its budget."""


class DegenerateMaximizerWarning(UserWarning):
    """Two maximizers of the envelope tie to within tolerance."""


def _bias(rho):
    # prior log odds of the +1 label, 0.5 * log(rho / (1 - rho))
    return 0.5 * (np.log(rho) - np.log1p(-rho))


def f_tilde(x, rho):
    """Posterior mean of the +-1 label given the field x: tanh(x + bias)."""
    x = np.asarray(x, dtype=float)
    if rho <= 0.0:
        return np.full_like(x, -1.0)[()]
    if rho >= 1.0:
        return np.full_like(x, 1.0)[()]
    return np.tanh(x + _bias(rho))


def t_tilde(x, rho):
    """Derivative of f_tilde in x, sech(x + bias)**2, overflow safe."""
    x = np.asarray(x, dtype=float)
    if rho <= 0.0 or rho >= 1.0:
        return np.zeros_like(x)[()]
    s = np.exp(-2.0 * np.abs(x + _bias(rho)))
    return 4.0 * s / (1.0 + s) ** 2


def logcosh(x):
    """log(cosh(x)) without overflow at large |x|."""
    x = np.asarray(x, dtype=float)
    a = np.abs(x)
    return a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)


def log_label_partition(x, rho):
    """log(rho * exp(x) + (1 - rho) * exp(-x)), the label average of exp(+-x)."""
    x = np.asarray(x, dtype=float)
    if rho <= 0.0:
        return (-x)[()]
    if rho >= 1.0:
        return (+x)[()]
    return 0.5 * np.log(4.0 * rho * (1.0 - rho)) + logcosh(x + _bias(rho))


def gaussian_tail_q(x):
    """Standard normal upper tail, Q(x) = int_x^inf exp(-z^2/2)/sqrt(2 pi) dz."""
    x = np.asarray(x, dtype=float)
    return 0.5 * erfc(x / np.sqrt(2.0))


def _newton_bracketed(p, t, bias, lo, hi, u0):
    # Root of r(u) = u - p - t*tanh(u + bias) on a bracket where r increases
    # through zero. Newton steps are clipped to the shrinking bracket and
    # replaced by bisection whenever they leave it or the slope degenerates.
    lo = np.array(lo, dtype=float, copy=True)
    hi = np.array(hi, dtype=float, copy=True)
    u = np.clip(np.asarray(u0, dtype=float), lo, hi)
    tol = _RES_TOL * np.sqrt(t) + 8.0 * _EPS * (1.0 + np.abs(p))
    done = np.zeros(u.shape, dtype=bool)
    r = np.zeros_like(u)
    for _ in range(200):
        th = np.tanh(u + bias)
        r = u - p - t * th
        done = done | (np.abs(r) <= tol)
        # a collapsed bracket is accepted only with a plausible residual
        done = done | (((hi - lo) <= 1e-14 * (1.0 + np.abs(u)))
                       & (np.abs(r) <= 1e-6 * (1.0 + t)))
        if done.all():
            return u
        lo = np.where(~done & (r < 0.0), u, lo)
        hi = np.where(~done & (r > 0.0), u, hi)
        dr = 1.0 - t * (1.0 - th * th)
        with np.errstate(divide="ignore", invalid="ignore"):
            un = u - r / dr
        bad = ~np.isfinite(un) | (un <= lo) | (un >= hi)
        un = np.where(bad, 0.5 * (lo + hi), un)
        u = np.where(done, u, un)
    th = np.tanh(u + bias)
    r = u - p - t * th
    if not np.all(done | (np.abs(r) <= tol)):
        worst = float(np.max(np.abs(np.where(done, 0.0, r))))
        raise MaximizerConvergenceError(
            "maximizer iteration stalled, max residual %.3e" % worst)
    return u


def _envelope_height(u, p, t, bias):
    # envelope value at the stationary point u, up to a p,t independent shift
    y = (u - p) / np.sqrt(t)
    return -0.5 * y * y + logcosh(u + bias)


def _solve_u_star_folded(p, t, bias):
    # For t > 1 the residual r(u) = u - p - t*tanh(u + bias) decreases between
    # the folds at u + bias = -+acosh(sqrt(t)) and increases outside, so there
    # is at most one candidate root on each outer piece; a root on the middle
    # piece is a local minimum of the envelope and never wanted.
    xt = np.arccosh(np.sqrt(t))
    ul_hi = -bias - xt
    ur_lo = -bias + xt
    r_lf = ul_hi - p - t * np.tanh(ul_hi + bias)
    r_rf = ur_lo - p - t * np.tanh(ur_lo + bias)
    has_l = r_lf >= 0.0
    has_r = r_rf <= 0.0
    u_l = np.full_like(p, np.nan)
    u_r = np.full_like(p, np.nan)
    if has_l.any():
        pm, tm = p[has_l], t[has_l]
        lo, hi = pm - tm, ul_hi[has_l]
        u_l[has_l] = _newton_bracketed(pm, tm, bias, lo, hi, 0.5 * (lo + hi))
    if has_r.any():
        pm, tm = p[has_r], t[has_r]
        lo, hi = ur_lo[has_r], pm + tm
        u_r[has_r] = _newton_bracketed(pm, tm, bias, lo, hi, 0.5 * (lo + hi))
    u = np.where(has_l, u_l, u_r)
    both = has_l & has_r
    if both.any():
        g_l = _envelope_height(u_l[both], p[both], t[both], bias)
        g_r = _envelope_height(u_r[both], p[both], t[both], bias)
        u[both] = np.where(g_l >= g_r, u_l[both], u_r[both])
        tie = np.abs(g_l - g_r) <= _TIE_TOL * (1.0 + np.maximum(np.abs(g_l),
                                                                np.abs(g_r)))
        if tie.any():
            warnings.warn(
                "two envelope maximizers tie to within tolerance; "
                "keeping the left branch",
                DegenerateMaximizerWarning, stacklevel=3)
    neither = ~has_l & ~has_r
    if neither.any():
        # only reachable through rounding right at a fold; take the nearer one
        u[neither] = np.where(np.abs(r_lf[neither]) <= np.abs(r_rf[neither]),
                              ul_hi[neither], ur_lo[neither])
    return u


def _solve_u_star(p, t, rho):
    """Location u_star = p + sqrt(t) * y_star of the envelope maximizer.

    Solves u = p + t * f_tilde(u, rho), vectorized over p and t.
    """
    p = np.asarray(p, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0):
        raise ValueError("t must be nonnegative")
    if rho <= 0.0:
        return p - t
    if rho >= 1.0:
        return p + t
    bias = float(_bias(rho))
    shape = np.broadcast(p, t).shape
    p = np.broadcast_to(p, shape).astype(float).ravel()
    t = np.broadcast_to(t, shape).astype(float).ravel()
    u = np.empty_like(p)
    hi_mask = t > 1.0
    lo_mask = ~hi_mask
    if lo_mask.any():
        pm, tm = p[lo_mask], t[lo_mask]
        u0 = pm + tm * np.tanh(pm + bias)
        u[lo_mask] = _newton_bracketed(pm, tm, bias, pm - tm, pm + tm, u0)
    if hi_mask.any():
        u[hi_mask] = _solve_u_star_folded(p[hi_mask], t[hi_mask], bias)
    return u.reshape(shape)


def f_rmle(p, t, rho):
    """F(p, t): slope in p of the maximized envelope, f_tilde at u_star."""
    u = _solve_u_star(p, t, rho)
    return f_tilde(u, rho)


def f_t_rmle(p, t, rho):
    """F and T from a single maximizer solve; T = t_tilde / (1 - t * t_tilde)."""
    u = _solve_u_star(p, t, rho)
    f = f_tilde(u, rho)
    tt = t_tilde(u, rho)
    denom = 1.0 - np.asarray(t, dtype=float) * tt
    if np.any(denom <= _DENOM_TOL):
        raise PotentialSingularityError(
            "T(p, t) diverges: 1 - t * t_tilde(u_star) <= %g" % _DENOM_TOL)
    return f, tt / denom


def t_rmle(p, t, rho):
    """T(p, t) = dF/dp, evaluated at the envelope maximizer."""
    return f_t_rmle(p, t, rho)[1]


def _refine_y(p, t, rho, y_lo, y_hi):
    # polish a grid cell that brackets a local maximum of G, in u coordinates
    st = np.sqrt(t)
    lo = np.asarray([p + st * y_lo])
    hi = np.asarray([p + st * y_hi])
    u = _newton_bracketed(np.asarray([p]), np.asarray([t]), float(_bias(rho)),
                          lo, hi, 0.5 * (lo + hi))
    return float((u[0] - p) / st)


def solve_y_star(p, t, rho, grid_step=0.01):
    """Maximizer over y of G(y) = -y**2/2 + log_label_partition(p + sqrt(t)*y).

    Coarse grid sweep followed by a bracketed Newton polish of the
    stationarity condition y = sqrt(t) * f_tilde(p + sqrt(t) * y). When a
    second grid maximum survives refinement within tolerance the tie is
    reported through DegenerateMaximizerWarning and the grid winner is kept.
    """
    p = float(p)
    t = float(t)
    if t < 0.0:
        raise ValueError("t must be nonnegative")
    if t == 0.0:
        return 0.0
    if rho <= 0.0:
        return -np.sqrt(t)
    if rho >= 1.0:
        return np.sqrt(t)
    st = np.sqrt(t)
    half = abs(p) + 10.0 * st
    y = np.arange(-half, half + grid_step, grid_step)
    g = -0.5 * y * y + log_label_partition(p + st * y, rho)
    i = int(np.argmax(g))
    i = min(max(i, 1), len(y) - 2)
    y_best = _refine_y(p, t, rho, y[i - 1], y[i + 1])
    # probe for a twin: mask the winner's neighborhood, look for another
    # local maximum of comparable height, refine it too before judging
    g_masked = g.copy()
    g_masked[max(i - 5, 0):min(i + 5, len(y) - 1) + 1] = -np.inf
    j = int(np.argmax(g_masked))
    if (np.isfinite(g_masked[j])
            and g[i] - g[j] <= 1e-8 * (1.0 + abs(g[i]))
            and 0 < j < len(y) - 1
            and g[j] >= g[j - 1] and g[j] >= g[j + 1]):
        y_twin = _refine_y(p, t, rho, y[j - 1], y[j + 1])
        gb = -0.5 * y_best ** 2 + float(log_label_partition(p + st * y_best, rho))
        gt = -0.5 * y_twin ** 2 + float(log_label_partition(p + st * y_twin, rho))
        if abs(gb - gt) <= _TIE_TOL * (1.0 + max(abs(gb), abs(gt))):
            warnings.warn(
                "two envelope maximizers tie to within tolerance; "
                "keeping the grid winner",
                DegenerateMaximizerWarning, stacklevel=2)
            return y_best
        if gt > gb:
            return y_twin
    return y_best


@dataclass(frozen=True)
class PotentialEval:
    """One scalar envelope evaluation: maximizer, slope, curvature, value."""
    p: float
    t: float
    y_star: float
    f_val: float
    t_val: float
    g_val: float


def evaluate_potential(p, t, rho):
    """Bundle y_star, F, T and the envelope value at a single (p, t, rho)."""
    p = float(p)
    t = float(t)
    u = float(np.asarray(_solve_u_star(p, t, rho)))
    y_star = 0.0 if t == 0.0 else (u - p) / np.sqrt(t)
    f_val = float(f_tilde(u, rho))
    tt = float(t_tilde(u, rho))
    denom = 1.0 - t * tt
    if denom <= _DENOM_TOL:
        raise PotentialSingularityError(
            "T(p, t) diverges: 1 - t * t_tilde(u_star) <= %g" % _DENOM_TOL)
    g_val = float(-0.5 * y_star ** 2 + log_label_partition(u, rho))
    return PotentialEval(p=p, t=t, y_star=y_star, f_val=f_val,
                         t_val=tt / denom, g_val=g_val)
