"""Gradient-descent baseline for the zero-temperature estimator.

Minimizes the regularized negative log-likelihood of a dataset by plain
fixed-step descent and provides the discrepancy metric, power-law
extrapolation, and bootstrap used to compare the minimizer against the
message-passing estimate. The objective drops every w-independent
constant (the ||x||^2/(2 s2) of each sample and the mixture density
prefactors), so values are comparable between runs of this module but
not against other formulations of the same likelihood.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import curve_fit

from .amp import _rel_change, _readonly
from .model import stream_rng
from .potentials import f_tilde

_DIVERGENCE_RUN = 50
_STREAM_BOOTSTRAP = 6
_FIT_BOUNDS = ((-np.inf, -np.inf, 1e-6), (np.inf, np.inf, 10.0))


class GdDivergenceError(RuntimeError):
    """The objective kept increasing; the step size is too large."""

    def __init__(self, msg, iteration):
        super().__init__(msg)
        self.iteration = int(iteration)


@dataclass(frozen=True)
class GdConfig:
    """Step size, stopping threshold, iteration cap and regularization.

    lam = None means the regularization strength comes from the model
    parameters; a number overrides it for the run.
    """

    eta: float = 0.1
    eps_gd: float = 1e-5
    max_iter: int = 200000
    lam: float | None = None

    def __post_init__(self):
        if not self.eta > 0.0:
            raise ValueError("eta must be positive")
        if not self.eps_gd > 0.0:
            raise ValueError("eps_gd must be positive")
        if int(self.max_iter) <= 0:
            raise ValueError("max_iter must be positive")
        if self.lam is not None and not self.lam > 0.0:
            raise ValueError("lam must be positive when given")


@dataclass(frozen=True)
class GdResult:
    """Final iterate of one descent run.

    objective_history holds the objective value at every accepted
    iterate including the start; rel_change_history the update widths
    ||w_new - w_old|| / ||w_new|| of every step taken.
    """

    w_hat: np.ndarray
    iter: int
    converged: bool
    objective_history: tuple
    rel_change_history: tuple


def _log_mixture(p, rho):
    # log(rho e^p + (1-rho) e^{-p}), stable for large |p|
    if rho <= 0.0:
        return -p
    if rho >= 1.0:
        return p
    return np.logaddexp(np.log(rho) + p, np.log1p(-rho) - p)


def objective_and_gradient(w, d, params):
    """Regularized negative log-likelihood and its gradient.

    Labeled samples contribute their squared residual, unlabeled ones
    the mixture marginal with the hidden label summed out; the gradient
    weighs each unlabeled residual by the responsibility tanh(p + b),
    the posterior mean of the hidden label at the sample's field
    p = x.w / (s2 sqrt(N)). Constants are dropped as documented in the
    module docstring.
    """
    w = np.asarray(w, dtype=float)
    n = d.w0.shape[0]
    if w.shape != (n,):
        raise ValueError("w must have length %d" % n)
    sig2 = params.sigma2
    lam = params.lam
    scale = 1.0 / (sig2 * np.sqrt(n))
    m_l = d.x_labeled.shape[0]
    m_u = d.x_unlabeled.shape[0]
    w_sq = float(w @ w)

    obj = 0.5 * lam * w_sq + (m_l + m_u) * w_sq / (2.0 * sig2 * n)
    grad = (lam + (m_l + m_u) / (sig2 * n)) * w
    if m_l:
        p_l = scale * (d.x_labeled @ w)
        obj -= float(d.y_labeled @ p_l)
        grad -= scale * (d.x_labeled.T @ d.y_labeled)
    if m_u:
        p_u = scale * (d.x_unlabeled @ w)
        obj -= float(np.sum(_log_mixture(p_u, params.rho)))
        grad -= scale * (d.x_unlabeled.T @ f_tilde(p_u, params.rho))
    return obj, grad


def _gd_trajectory_row(it, w, w0, rel):
    norm = float(w0 @ w0)
    k = float(w @ w0) / norm
    resid = w - k * w0
    v = float(resid @ resid) / w0.shape[0]
    return (it, k, v, float(rel))


def run_gd(d, cfg, params, init=None, trajectory=None):
    """Fixed-step descent on the regularized objective.

    Starts from the zero vector unless an explicit start is given and
    stops once the update width ||w_new - w_old|| / ||w_new|| falls
    below cfg.eps_gd, or at cfg.max_iter (flagged unconverged). A run
    whose objective increases for 50 consecutive steps is aborted as
    divergent. The regularization is cfg.lam when set, params.lam
    otherwise. When a list is passed as trajectory, a row
    (iter, k, v, rel_change) is appended for the start point and after
    every step, matching the message-passing trajectory convention.
    """
    n = d.w0.shape[0]
    if init is None:
        w = np.zeros(n)
    else:
        w = np.asarray(init, dtype=float)
        if w.shape != (n,):
            raise ValueError("init vector must have length %d" % n)
        w = w.copy()
    p_eff = params if cfg.lam is None else params.replace(lam=cfg.lam)

    obj, grad = objective_and_gradient(w, d, p_eff)
    obj_hist = [obj]
    rel_hist = []
    if trajectory is not None:
        trajectory.append(_gd_trajectory_row(0, w, d.w0, float("nan")))
    increases = 0
    converged = False
    it = 0
    for it in range(1, int(cfg.max_iter) + 1):
        w_new = w - cfg.eta * grad
        rel = _rel_change(w_new, w)
        obj_new, grad_new = objective_and_gradient(w_new, d, p_eff)
        if not np.isfinite(obj_new) or not np.all(np.isfinite(w_new)):
            raise GdDivergenceError(
                "step %d produced non-finite values; reduce eta" % it, it)
        increases = increases + 1 if obj_new > obj_hist[-1] else 0
        if increases >= _DIVERGENCE_RUN:
            raise GdDivergenceError(
                "objective increased for %d consecutive steps; reduce eta"
                % _DIVERGENCE_RUN, it)
        w, grad = w_new, grad_new
        obj_hist.append(obj_new)
        rel_hist.append(float(rel))
        if trajectory is not None:
            trajectory.append(_gd_trajectory_row(it, w, d.w0, rel))
        if rel < cfg.eps_gd:
            converged = True
            break
    return GdResult(w_hat=_readonly(w), iter=it, converged=converged,
                    objective_history=tuple(obj_hist),
                    rel_change_history=tuple(rel_hist))


def delta_gd_amp(w_gd, w_amp):
    """Normalized L2 discrepancy ||w_gd - w_amp|| / ||w_gd||."""
    w_gd = np.asarray(w_gd, dtype=float)
    w_amp = np.asarray(w_amp, dtype=float)
    if w_gd.shape != w_amp.shape:
        raise ValueError("estimates must have matching shapes")
    denom = float(np.linalg.norm(w_gd))
    if denom == 0.0:
        raise ValueError("the descent estimate has zero norm")
    return float(np.linalg.norm(w_gd - w_amp)) / denom


@dataclass(frozen=True)
class ScalingFit:
    """Result of extrapolating the discrepancy to infinite size.

    delta0 + a * N**(-d) fitted through the per-size sample means;
    errors are standard errors of those means. degenerate marks inputs
    whose means carry no size dependence (a pinned to zero, d
    meaningless). bootstrap_samples stays empty unless filled by
    bootstrap_delta0.
    """

    delta0: float
    a: float
    d: float
    residual: float
    n_values: tuple
    means: tuple
    errors: tuple
    degenerate: bool = False
    bootstrap_samples: tuple = ()


def _power_law(n, delta0, a, d):
    return delta0 + a * np.power(n, -d)


def _means_and_errors(samples):
    n_values = sorted(int(n) for n in samples)
    if len(n_values) < 3:
        raise ValueError("need at least 3 distinct sizes, got %d"
                         % len(n_values))
    means, errors = [], []
    for n in n_values:
        vals = np.asarray(samples[n], dtype=float)
        if vals.size == 0:
            raise ValueError("no samples for N=%d" % n)
        means.append(float(np.mean(vals)))
        errors.append(float(np.std(vals, ddof=1) / np.sqrt(vals.size))
                      if vals.size > 1 else 0.0)
    return np.array(n_values, dtype=float), np.array(means), np.array(errors)


def fit_power_law(samples):
    """Least-squares fit of delta0 + a*N^-d through per-size means.

    samples maps a size N to the sequence of discrepancy values
    measured there; at least three distinct sizes are required. Means
    with no spread across sizes short-circuit to a degenerate constant
    fit. Non-convergence of the least squares propagates.
    """
    n_arr, means, errors = _means_and_errors(samples)
    spread = float(np.max(means) - np.min(means))
    if spread <= 1e-12 * max(1.0, float(np.max(np.abs(means)))):
        return ScalingFit(delta0=float(np.mean(means)), a=0.0, d=np.nan,
                          residual=0.0, n_values=tuple(int(n) for n in n_arr),
                          means=tuple(means), errors=tuple(errors),
                          degenerate=True)
    p0 = (float(np.min(means)), 1.0, 0.5)
    popt, _ = curve_fit(_power_law, n_arr, means, p0=p0, bounds=_FIT_BOUNDS,
                        maxfev=20000)
    resid = float(np.sqrt(np.mean((_power_law(n_arr, *popt) - means) ** 2)))
    return ScalingFit(delta0=float(popt[0]), a=float(popt[1]),
                      d=float(popt[2]), residual=resid,
                      n_values=tuple(int(n) for n in n_arr),
                      means=tuple(means), errors=tuple(errors))


def bootstrap_delta0(samples, n_boot=1000, seed=0):
    """Bootstrap distribution of the extrapolated discrepancy.

    Resamples each size's values with replacement, refits, and collects
    the delta0 draws. Refits that fail to converge are skipped and
    counted in a warning. At least 100 resamples are required for the
    distribution to mean anything.
    """
    if int(n_boot) < 100:
        raise ValueError("n_boot must be at least 100")
    base = {int(n): np.asarray(v, dtype=float) for n, v in samples.items()}
    _means_and_errors(base)
    rng = stream_rng(seed, _STREAM_BOOTSTRAP)
    draws = []
    failures = 0
    for _ in range(int(n_boot)):
        resampled = {n: vals[rng.integers(0, vals.size, size=vals.size)]
                     for n, vals in base.items()}
        try:
            draws.append(fit_power_law(resampled).delta0)
        except RuntimeError:
            failures += 1
    if failures:
        warnings.warn("%d of %d bootstrap refits failed to converge"
                      % (failures, int(n_boot)))
    return np.asarray(draws)


def attach_bootstrap(fit, samples, n_boot=1000, seed=0):
    """Return the fit with its bootstrap_samples field filled in."""
    draws = bootstrap_delta0(samples, n_boot=n_boot, seed=seed)
    return dataclasses.replace(fit, bootstrap_samples=tuple(draws))
