"""Fixed-susceptibility message-passing solvers on concrete datasets.

Two solvers estimate the cluster center from a Dataset. The fast one
tracks a single mean vector and one scalar field per unlabeled sample,
with an explicit memory correction that cancels self-feedback. The
edge-message variant keeps a full cavity matrix (one message per
sample/coordinate pair) and serves as a small-size reference; the two
agree coordinate-wise up to O(1/sqrt(N)).

Both solvers hold the susceptibility chi frozen during the iteration.
Letting chi float makes the iteration oscillate or diverge, so the
susceptibility update is skipped on purpose and chi is a caller-chosen
constant; the lambda-chi table in state_evolution maps a regularization
strength to the matching chi.

The zero-temperature estimator uses the envelope moments F(p, chi/s2)
and T(p, chi/s2); the posterior-mean estimator uses the label moments,
which take no second argument.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .model import Dataset, ModelParams, stream_rng
from .potentials import f_rmle, f_t_rmle, f_tilde, t_tilde
from .state_evolution import OrderParams

_REL_CHANGE_BLOWUP = 1e6
_RANDOM_INIT_SCALE = 1e-3
_STREAM_AMP_INIT = 5  # streams 0..4 belong to dataset generation
_ABP_MAX_N = 500


class AmpDivergenceError(RuntimeError):
    """A step produced non-finite values or a relative blow-up."""

    def __init__(self, msg, iteration):
        super().__init__(msg)
        self.iteration = int(iteration)


def _readonly(a):
    out = np.ascontiguousarray(np.asarray(a, dtype=float))
    out.setflags(write=False)
    return out


@dataclasses.dataclass(frozen=True)
class AmpState:
    """One iterate of the single-vector solver.

    w_hat is the length-N estimate and p_tilde the length-M_u fields of
    the unlabeled samples. f_cache holds the moment values evaluated on
    the previous fields; the next field update subtracts this memory.
    chi stays constant across the whole trajectory. rel_change_history
    records ||w_new - w_old||_2 / ||w_new||_2 for every completed step.
    """

    w_hat: np.ndarray
    p_tilde: np.ndarray
    chi: float
    f_cache: np.ndarray
    iter: int = 0
    converged: bool = False
    rel_change_history: tuple = ()

    def __post_init__(self):
        if not self.chi > 0.0:
            raise ValueError("chi must be positive")
        if self.p_tilde.shape != self.f_cache.shape:
            raise ValueError("p_tilde and f_cache must have equal length")


@dataclasses.dataclass(frozen=True)
class AbpState:
    """One iterate of the edge-message solver.

    Entry [nu, i] of w_hat_edges is the cavity mean of coordinate i
    with unlabeled sample nu removed, and the same entry of
    p_tilde_edges is the field of sample nu with coordinate i removed.
    s_per_sample carries the per-sample field variances; with chi held
    fixed they are constant across iterations. chi_edges is that fixed
    scalar (per-edge susceptibilities collapse onto it under the
    frozen-chi control).
    """

    w_hat_edges: np.ndarray
    p_tilde_edges: np.ndarray
    s_per_sample: np.ndarray
    chi_edges: float
    iter: int = 0
    converged: bool = False
    rel_change_history: tuple = ()


class _AmpWork:
    """Per-dataset arrays shared by all steps of one run."""

    __slots__ = ("h_l", "xu", "x2", "s2_row")

    def __init__(self, d, params):
        n = d.w0.shape[0]
        scale = 1.0 / (params.sigma2 * np.sqrt(n))
        self.h_l = scale * (d.x_labeled.T @ d.y_labeled)
        self.xu = d.x_unlabeled
        self.x2 = d.x_unlabeled ** 2
        self.s2_row = self.x2.sum(axis=1)


def _moments(mode, p, t_arg, rho):
    if p.size == 0:
        return np.zeros_like(p), np.zeros_like(p)
    if mode == "rmle":
        return f_t_rmle(p, t_arg, rho)
    return f_tilde(p, rho), t_tilde(p, rho)


def _rel_change(w_new, w_old):
    delta = float(np.linalg.norm(w_new - w_old))
    denom = float(np.linalg.norm(w_new))
    if denom > 0.0:
        return delta / denom
    return 0.0 if delta == 0.0 else np.inf


def _amp_step(state, d, params, mode, work=None):
    if work is None:
        work = _AmpWork(d, params)
    n = d.w0.shape[0]
    if state.w_hat.shape[0] != n:
        raise ValueError("state dimension does not match the dataset")
    if state.p_tilde.shape[0] != work.xu.shape[0]:
        raise ValueError("field count does not match the unlabeled set")
    sig2 = params.sigma2
    chi = state.chi
    scale = 1.0 / (sig2 * np.sqrt(n))

    p_new = scale * (work.xu @ state.w_hat)
    if state.iter > 0 and p_new.size:
        # Memory correction; at step 0 the estimate is independent of
        # the unlabeled samples, so there is no feedback to cancel.
        p_new = p_new - (chi / (sig2 * sig2 * n)) * work.s2_row * state.f_cache
    if p_new.size and not np.all(np.isfinite(p_new)):
        raise AmpDivergenceError(
            "iteration %d produced non-finite fields" % state.iter, state.iter)

    f_new, t_new = _moments(mode, p_new, chi / sig2, params.rho)
    onsager = state.w_hat * ((work.x2.T @ t_new) / (sig2 * sig2 * n))
    w_new = chi * (work.h_l + scale * (work.xu.T @ f_new) - onsager)

    rel = _rel_change(w_new, state.w_hat)
    finite = np.all(np.isfinite(w_new)) and np.all(np.isfinite(p_new))
    if not finite or rel > _REL_CHANGE_BLOWUP:
        raise AmpDivergenceError(
            "iteration %d diverged (rel change %.3g, max |w| %.3g)"
            % (state.iter, rel, float(np.max(np.abs(w_new), initial=0.0))),
            state.iter)

    return AmpState(
        w_hat=_readonly(w_new), p_tilde=_readonly(p_new), chi=chi,
        f_cache=_readonly(f_new), iter=state.iter + 1, converged=False,
        rel_change_history=state.rel_change_history + (float(rel),))


def amp_step_rmle(state, d, params):
    """One step of the zero-temperature solver with chi held fixed."""
    return _amp_step(state, d, params, "rmle")


def amp_step_bayes(state, d, params):
    """One step of the posterior-mean solver with chi held fixed."""
    return _amp_step(state, d, params, "bayes")


def _init_vector(d, params, chi, init):
    n = d.w0.shape[0]
    if isinstance(init, str):
        if init == "zero":
            return np.zeros(n)
        if init == "supervised":
            if d.x_labeled.shape[0] > 0:
                scale = 1.0 / (params.sigma2 * np.sqrt(n))
                return chi * scale * (d.x_labeled.T @ d.y_labeled)
            # Nothing supervised to start from; a small random vector
            # breaks the symmetry without committing to a direction.
            rng = stream_rng(d.seed, _STREAM_AMP_INIT)
            return rng.normal(0.0, _RANDOM_INIT_SCALE, n)
        raise ValueError("init must be 'zero', 'supervised' or a vector")
    w = np.asarray(init, dtype=float)
    if w.shape != (n,):
        raise ValueError("init vector must have length %d" % n)
    return w.copy()


def initial_amp_state(d, params, chi, init="supervised"):
    """Build the starting state: fields at zero, memory at the origin value."""
    chi = float(chi)
    if not chi > 0.0:
        raise ValueError("chi must be positive")
    m_u = d.x_unlabeled.shape[0]
    w = _init_vector(d, params, chi, init)
    if params.estimator_mode == "rmle":
        f0 = float(f_rmle(0.0, chi / params.sigma2, params.rho))
    else:
        f0 = float(f_tilde(0.0, params.rho))
    return AmpState(
        w_hat=_readonly(w), p_tilde=_readonly(np.zeros(m_u)), chi=chi,
        f_cache=_readonly(np.full(m_u, f0)), iter=0, converged=False,
        rel_change_history=())


def run_amp(d, params, chi, init="supervised", eps=1e-8, max_iter=1000,
            trajectory=None):
    """Iterate the mode-appropriate step until the estimate settles.

    Stops once the relative change of w_hat drops below eps, or after
    max_iter steps (the returned state is then flagged unconverged;
    max_iter=0 returns the initial state untouched). If a list is
    passed as trajectory, a row (iter, k, v, rel_change) is appended
    for the initial state (rel_change nan) and after every step.
    """
    if not eps > 0.0:
        raise ValueError("eps must be positive")
    state = initial_amp_state(d, params, chi, init)
    work = _AmpWork(d, params)
    mode = params.estimator_mode
    if trajectory is not None:
        trajectory.append(_trajectory_row(state, d))
    for _ in range(int(max_iter)):
        state = _amp_step(state, d, params, mode, work)
        if trajectory is not None:
            trajectory.append(_trajectory_row(state, d))
        if state.rel_change_history[-1] < eps:
            state = dataclasses.replace(state, converged=True)
            break
    return state


def order_params_from_state(state, d, lambda0=None):
    """Read off (k, v) of an iterate against the true center.

    k is the projection of w_hat on w0 and v the per-coordinate squared
    residual around k*w0. When lambda0 is not given, the inverse
    empirical second moment of w0 stands in for it (it only enters the
    derived field variance, not k or v).
    """
    w0 = d.w0
    norm = float(w0 @ w0)
    if norm == 0.0:
        raise ValueError("w0 has zero norm")
    k = float(state.w_hat @ w0) / norm
    resid = state.w_hat - k * w0
    v = float(resid @ resid) / w0.shape[0]
    if lambda0 is None:
        lambda0 = w0.shape[0] / norm
    return OrderParams.make(state.chi, k, v, lambda0, it=state.iter)


def _trajectory_row(state, d):
    op = order_params_from_state(state, d)
    rel = state.rel_change_history[-1] if state.rel_change_history else float("nan")
    return (state.iter, op.k, op.v, float(rel))


def trajectory_to_csv(rows, path=None):
    """Serialize (iter, k, v, rel_change) rows; returns the text."""
    lines = ["iter,k,v,rel_change"]
    for it, k, v, rel in rows:
        lines.append("%d,%s,%s,%s"
                     % (int(it), repr(float(k)), repr(float(v)), repr(float(rel))))
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def _abp_moment(mode, p, s, rho):
    if p.size == 0:
        return np.zeros_like(p)
    if mode == "rmle":
        return f_rmle(p, s, rho)
    return f_tilde(p, rho)


def run_abp(d, params, chi, eps=1e-8, max_iter=1000, init="supervised"):
    """Iterate the full edge messages; a small-N reference for run_amp.

    Memory is O(N * M_u), hence the hard size guard. The per-sample
    variances are fixed by chi and computed once. Convergence is
    measured by the relative Frobenius change of the cavity matrix.
    """
    if not eps > 0.0:
        raise ValueError("eps must be positive")
    n = d.w0.shape[0]
    if n > _ABP_MAX_N:
        raise ValueError("edge-message solver is limited to N <= %d" % _ABP_MAX_N)
    chi = float(chi)
    if not chi > 0.0:
        raise ValueError("chi must be positive")
    sig2 = params.sigma2
    mode = params.estimator_mode
    xu = d.x_unlabeled
    m_u = xu.shape[0]
    scale = 1.0 / (sig2 * np.sqrt(n))
    h_l = scale * (d.x_labeled.T @ d.y_labeled)
    s = (chi / (sig2 * sig2 * n)) * (xu ** 2).sum(axis=1)

    w_edges = np.tile(_init_vector(d, params, chi, init), (m_u, 1))
    p_edges = np.zeros((m_u, n))
    converged = False
    history = ()
    it = 0
    for it in range(1, int(max_iter) + 1):
        row_dot = np.einsum("mi,mi->m", xu, w_edges)
        p_edges = (row_dot[:, None] - xu * w_edges) * scale
        if p_edges.size and not np.all(np.isfinite(p_edges)):
            raise AmpDivergenceError(
                "edge iteration %d produced non-finite fields" % (it - 1), it - 1)
        f_edges = _abp_moment(mode, p_edges, s[:, None], params.rho)
        col = np.einsum("mi,mi->i", xu, f_edges)
        w_new = chi * (h_l[None, :] + (col[None, :] - xu * f_edges) * scale)
        rel = _rel_change(w_new, w_edges)
        if not np.all(np.isfinite(w_new)) or rel > _REL_CHANGE_BLOWUP:
            raise AmpDivergenceError(
                "edge iteration %d diverged (rel change %.3g)" % (it - 1, rel),
                it - 1)
        history = history + (float(rel),)
        w_edges = w_new
        if rel < eps:
            converged = True
            break
    return AbpState(
        w_hat_edges=_readonly(w_edges), p_tilde_edges=_readonly(p_edges),
        s_per_sample=_readonly(s), chi_edges=chi, iter=it,
        converged=converged, rel_change_history=history)


def abp_full_estimate(state, d, params):
    """Collapse edge messages to one vector: the no-cavity mean.

    Uses the full sum over unlabeled samples with the stored fields, so
    with no unlabeled data it reduces to the supervised closed form.
    """
    n = d.w0.shape[0]
    sig2 = params.sigma2
    scale = 1.0 / (sig2 * np.sqrt(n))
    h_l = scale * (d.x_labeled.T @ d.y_labeled)
    if state.w_hat_edges.shape[0] == 0:
        return state.chi_edges * h_l
    f_edges = _abp_moment(params.estimator_mode, state.p_tilde_edges,
                          state.s_per_sample[:, None], params.rho)
    col = np.einsum("mi,mi->i", d.x_unlabeled, f_edges)
    return state.chi_edges * (h_l + col * scale)
