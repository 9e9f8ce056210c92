"""Named experiment protocols with deterministic persistence.

Each protocol is a pure function of (config, seeds) that produces CSV
tables; run_experiment dispatches on the experiment name, executes sweep
cells on an optional thread pool, and writes every artifact from the
main thread. Numeric cells are formatted with repr, so two runs of the
same config are byte-identical. A manifest records the config digest and
the status of every task; re-running an identical config is a no-op
unless forced.

Experiments
-----------
lambda-chi      regularization-susceptibility tables per branch and alpha_u
amp-vs-se       finite-size message passing against the scalar recursion
gd-vs-amp       descent baseline: scaling, trajectory, or sensitivity mode
phase-diagram   classify_phase over a (chi, alpha_u) grid, optional slices
mse-heatmap     SE estimation error over an (snr, alpha_u) grid per lambda
optimal-lambda  golden-section search of the best 1/lambda per metric
ge-curve        gap between optimally tuned and Bayes-reference errors
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .amp import run_amp
from .gd import (GdConfig, GdDivergenceError, attach_bootstrap, delta_gd_amp,
                 fit_power_law, run_gd)
from .metrics import ge_from_order_params, mse_from_order_params
from .model import ModelParams, generate_dataset
from .phases import classify_phase, nishimori_line
from .state_evolution import (GaussHermite, LambdaRangeError,
                              build_lambda_chi_table, chi_from_lambda,
                              se_fixed_point, se_trajectory)

SCHEMA_VERSION = 1

EXPERIMENTS = ("amp-vs-se", "gd-vs-amp", "lambda-chi", "phase-diagram",
               "mse-heatmap", "optimal-lambda", "ge-curve")

_INV_LAMBDA_BRACKET = (0.01, 1.2)
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
_FLAT_CURVE_WIDTH = 1e-9


# ---------------------------------------------------------------- plumbing

def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _csv_text(columns, rows):
    lines = ["# ssl-gmm-lab v%s schema=%d" % (__version__, SCHEMA_VERSION),
             ",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def _slug(value):
    if isinstance(value, str):
        return value
    return ("%g" % float(value)).replace(".", "p").replace("-", "m")


def _utcnow():
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _expand_grid(raw):
    if isinstance(raw, dict):
        num = int(raw["num"])
        lo, hi = float(raw["start"]), float(raw["stop"])
        spacing = raw.get("spacing", "linear")
        if spacing == "log":
            values = np.geomspace(lo, hi, num)
        elif spacing == "linear":
            values = np.linspace(lo, hi, num)
        else:
            raise ValueError("grid spacing must be 'linear' or 'log'")
        return tuple(float(v) for v in values)
    return tuple(float(v) for v in raw)


def _expand_seeds(raw):
    if isinstance(raw, dict):
        first = int(raw.get("first", 0))
        return tuple(range(first, first + int(raw["count"])))
    return tuple(int(s) for s in raw)


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """One experiment run: protocol name, model point, grids, knobs."""
    experiment: str
    model: ModelParams
    output_dir: str
    grids: dict = dataclasses.field(default_factory=dict)
    seeds: tuple = (0,)
    quadrature_nodes: int = 201
    eps_amp: float = 1e-8
    eps_se: float = 1e-8
    gd: GdConfig = dataclasses.field(default_factory=GdConfig)
    options: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError("unknown experiment %r; choose from %s"
                             % (self.experiment, ", ".join(EXPERIMENTS)))
        if not self.output_dir:
            raise ValueError("output_dir must be a nonempty path")
        if self.quadrature_nodes < 3:
            raise ValueError("quadrature_nodes must be at least 3")

    @classmethod
    def from_dict(cls, raw):
        d = dict(raw)
        for req in ("experiment", "model", "output_dir"):
            if req not in d:
                raise ValueError("config is missing %r" % req)
        model = ModelParams.from_dict(d.pop("model"))
        grids = {name: _expand_grid(g)
                 for name, g in d.pop("grids", {}).items()}
        seeds = _expand_seeds(d.pop("seeds", [0]))
        gd_cfg = GdConfig(**d.pop("gd", {}))
        cfg = cls(experiment=d.pop("experiment"), model=model,
                  output_dir=d.pop("output_dir"), grids=grids, seeds=seeds,
                  quadrature_nodes=int(d.pop("quadrature_nodes", 201)),
                  eps_amp=float(d.pop("eps_amp", 1e-8)),
                  eps_se=float(d.pop("eps_se", 1e-8)),
                  gd=gd_cfg, options=d.pop("options", {}))
        if d:
            raise ValueError("unknown config keys: %s" % sorted(d))
        return cfg

    def grid(self, name):
        try:
            return self.grids[name]
        except KeyError:
            raise KeyError("experiment %r needs a grid named %r"
                           % (self.experiment, name)) from None


def config_digest(cfg):
    """Stable hash of everything that affects the outputs."""
    payload = {
        "experiment": cfg.experiment,
        "model": dataclasses.asdict(cfg.model),
        "grids": {k: list(v) for k, v in sorted(cfg.grids.items())},
        "seeds": list(cfg.seeds),
        "quadrature_nodes": cfg.quadrature_nodes,
        "eps_amp": cfg.eps_amp,
        "eps_se": cfg.eps_se,
        "gd": dataclasses.asdict(cfg.gd),
        "options": cfg.options,
    }
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclasses.dataclass(frozen=True)
class RunManifest:
    """Provenance record of one run, written as manifest.json."""
    config_hash: str
    version: str
    started: str
    finished: str
    status: dict
    outputs: tuple
    cached: bool = False

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["outputs"] = list(self.outputs)
        return d


def _map_cells(fn, cells, threads):
    if threads <= 1:
        return [fn(c) for c in cells]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, cells))


def _guard(fn, cell):
    try:
        return True, fn(cell)
    except Exception as exc:  # sweep cells must not abort the run
        return False, "%s: %s" % (type(exc).__name__, exc)


# ------------------------------------------------------------- SE helpers

def _gauss_nodes(cfg, nodes=None):
    n = int(nodes if nodes is not None else cfg.quadrature_nodes)
    return GaussHermite.make(n)


def _capped_grid(sigma2, lam_min, points=241):
    # chi never exceeds 1/lambda, so the table must reach past it even
    # when 10*sigma2 (the default cap) falls short at high snr
    cap = max(10.0 * sigma2, 1.5 / lam_min)
    return np.geomspace(1e-3 * sigma2, cap, points)


def _branch_fixed_point(params, lam, branch, eps, gh, table=None):
    if table is None:
        table = build_lambda_chi_table(
            params, branch=branch, chi_grid=_capped_grid(params.sigma2, lam),
            eps=eps, gh=gh)
    chi = chi_from_lambda(params, lam, branch=branch, table=table,
                          eps=eps, gh=gh)
    res = se_fixed_point(params, chi, init=branch, eps=eps, gh=gh)
    return chi, res


def _chi_at_lambda(params, lam, table_nodes, eps, gh):
    """Informed-branch chi for one lambda, tolerating boundary stalls.

    Grid points that sit on a phase boundary stall the inversion because
    the lambda(chi) map has a cusp there; the stall point still pins the
    boundary chi far below grid resolution, so accept it when the leftover
    residual is small.
    """
    table = build_lambda_chi_table(
        params, branch="informed",
        chi_grid=_capped_grid(params.sigma2, lam, table_nodes),
        eps=eps, gh=gh)
    try:
        return chi_from_lambda(params, lam, branch="informed", table=table,
                               eps=eps, gh=gh)
    except LambdaRangeError as exc:
        if exc.chi is None or abs(exc.residual) > 1e-4 * max(lam, 1.0):
            raise
        return exc.chi


def _metric_value(metric, op, params):
    if metric == "mse":
        return float(mse_from_order_params(op.k, op.v, params.lambda0))
    if metric == "ge":
        return float(ge_from_order_params(op.k, op.v, params))
    raise ValueError("metric must be 'mse' or 'ge'")


def _bo_reference(model, metric, eps, gh):
    p = model.replace(estimator_mode="bayes", lam=model.lambda0)
    _, res = _branch_fixed_point(p, p.lambda0, "informed", eps, gh)
    return _metric_value(metric, res.op, p)


class _RmleErrorCurve:
    """Memoized metric(1/lambda) evaluations sharing one branch table."""

    def __init__(self, model, metric, eps, gh):
        self.params = model.replace(estimator_mode="rmle")
        self.metric = metric
        self.eps = eps
        self.gh = gh
        grid = _capped_grid(model.sigma2, 1.0 / _INV_LAMBDA_BRACKET[1])
        self.table = build_lambda_chi_table(self.params, branch="informed",
                                            chi_grid=grid, eps=eps, gh=gh)
        self._cache = {}

    def __call__(self, inv_lambda):
        x = float(inv_lambda)
        if x not in self._cache:
            chi = chi_from_lambda(self.params, 1.0 / x, branch="informed",
                                  table=self.table, eps=self.eps, gh=self.gh)
            res = se_fixed_point(self.params, chi, init="informed",
                                 eps=self.eps, gh=self.gh)
            self._cache[x] = _metric_value(self.metric, res.op, self.params)
        return self._cache[x]


def _golden_min(f, lo, hi, tol=1e-6):
    a, b = float(lo), float(hi)
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    x = c if fc < fd else d
    return x, f(x)


@dataclasses.dataclass(frozen=True)
class OptimalLambdaResult:
    """Outcome of one optimal-regularization search.

    Iterating yields (lambda_star, error_at_star, bo_error) so the
    result unpacks as a plain triple; the flags stay addressable.
    """
    lambda_star: float
    error_at_star: float
    bo_error: float
    metric: str
    flagged_non_unimodal: bool = False
    flat_region: bool = False
    curve: tuple = ()

    def __iter__(self):
        return iter((self.lambda_star, self.error_at_star, self.bo_error))

    @property
    def rel_gap(self):
        return (self.error_at_star - self.bo_error) / self.bo_error


def _search_on_model(model, metric, eps, gh, curve_grid=None,
                     check_points=120):
    """Golden-section search of 1/lambda, cross-checked on a dense curve."""
    lo, hi = _INV_LAMBDA_BRACKET
    if curve_grid is None:
        curve_grid = np.linspace(lo, hi, check_points)
    f = _RmleErrorCurve(model, metric, eps, gh)
    curve = tuple((float(x), f(x)) for x in curve_grid)
    values = np.array([c[1] for c in curve])
    bo = _bo_reference(model, metric, eps, gh)

    if values.max() - values.min() < _FLAT_CURVE_WIDTH:
        # the metric does not respond to lambda here (low-SNR ge case):
        # report the flat level instead of an arbitrary arg-min
        return OptimalLambdaResult(
            lambda_star=float("nan"), error_at_star=float(values.min()),
            bo_error=bo, metric=metric, flat_region=True, curve=curve)

    x_star, err_star = _golden_min(f, lo, hi)
    i_min = int(np.argmin(values))
    spacing = float(curve_grid[1] - curve_grid[0])
    flagged = abs(x_star - curve_grid[i_min]) > 1.5 * spacing
    if flagged:
        # bracket inconsistency: the curve is not unimodal over the full
        # bracket, so refine locally around the dense-grid minimum
        lo_r = curve_grid[max(i_min - 1, 0)]
        hi_r = curve_grid[min(i_min + 1, len(curve_grid) - 1)]
        x_star, err_star = _golden_min(f, lo_r, hi_r)
    return OptimalLambdaResult(
        lambda_star=1.0 / x_star, error_at_star=float(err_star), bo_error=bo,
        metric=metric, flagged_non_unimodal=flagged, curve=curve)


def search_optimal_lambda(cfg, metric):
    """Best regularization for the given metric at the config's model point.

    Returns an OptimalLambdaResult, which unpacks as the triple
    (lambda_star, error_at_star, bo_error).
    """
    gh = _gauss_nodes(cfg)
    grid = cfg.grids.get("inv_lambda")
    grid = np.asarray(grid) if grid else None
    return _search_on_model(cfg.model, metric, cfg.eps_se, gh,
                            curve_grid=grid)


def gap_curves(cfg, metric):
    """Optimal-RMLE vs Bayes-reference error along the snr grid.

    The config must define an "snr" grid and exactly one of "alpha_u" or
    "rho" as the family axis. Returns (columns, rows); rows hold the
    optimal error, the reference error, and their relative gap.
    """
    axis = [name for name in ("alpha_u", "rho") if name in cfg.grids]
    if len(axis) != 1:
        raise KeyError("gap curves need an 'snr' grid plus exactly one "
                       "of 'alpha_u' or 'rho'")
    axis = axis[0]
    gh = _gauss_nodes(cfg)
    columns = ("snr", axis, "inv_lambda_star", "rmle_error", "bo_error",
               "rel_gap", "flat_region")
    rows = []
    check_points = int(cfg.options.get("check_points", 25))
    for value in cfg.grid(axis):
        for snr in cfg.grid("snr"):
            model = cfg.model.replace(
                sigma2=1.0 / (snr * cfg.model.lambda0), **{axis: value})
            res = _search_on_model(model, metric, cfg.eps_se, gh,
                                   check_points=check_points)
            inv_star = (1.0 / res.lambda_star
                        if np.isfinite(res.lambda_star) else float("nan"))
            rows.append((float(snr), float(value), inv_star,
                         res.error_at_star, res.bo_error,
                         res.rel_gap, res.flat_region))
    return columns, rows


# ------------------------------------------------------------- protocols

def _run_lambda_chi(cfg, threads):
    modes = cfg.options.get("modes") or [cfg.model.estimator_mode]
    branch = cfg.options.get("branch", "uninformed")
    chi_grid = np.asarray(cfg.grid("chi"), dtype=float)
    cells = [(mode, au) for mode in modes for au in cfg.grid("alpha_u")]
    gh = _gauss_nodes(cfg)

    def cell(c):
        mode, au = c
        p = cfg.model.replace(alpha_u=au, estimator_mode=mode)
        table = build_lambda_chi_table(p, branch=branch, chi_grid=chi_grid,
                                       eps=cfg.eps_se, gh=gh)
        rows = [(float(c_), float(l_), float(k_), float(v_), t_)
                for c_, l_, k_, v_, t_ in zip(table.chi, table.lam,
                                              table.k_star, table.v_star,
                                              table.phase)]
        return ("lambda_chi_%s_alpha_u_%s.csv" % (mode, _slug(au)), rows)

    files, status, points = [], {}, {}
    for c, (ok, payload) in zip(cells, _map_cells(lambda c: _guard(cell, c),
                                                  cells, threads)):
        name = "mode=%s,alpha_u=%s" % (c[0], _slug(c[1]))
        if ok:
            fname, rows = payload
            files.append((fname, ("chi", "lambda", "k_star", "v_star",
                                  "phase"), rows))
            status[name] = "ok"
            points[fname] = len(rows)
        else:
            status[name] = "failed: %s" % payload
    return files, {"branch": branch, "points_per_file": points}, status


def _amp_se_init(params, chi):
    """Matched start pair: AMP init spec and the SE iterate it follows."""
    if params.alpha_l > 0.0:
        k0 = chi * params.alpha_l / params.sigma2
        v0 = chi ** 2 * params.alpha_l / params.sigma2
        return "supervised", (k0, v0)
    return "tilt", (0.05, 0.0)


def _run_amp_vs_se(cfg, threads):
    panels = cfg.options.get("panels") or [{}]
    chi = float(cfg.options.get("chi", 0.3))
    n_steps = int(cfg.options.get("n_steps", 25))
    dump = int(cfg.options.get("dump_trajectories", 1))
    gh = _gauss_nodes(cfg)
    files, status, summary = [], {}, {"panels": []}

    for idx, overrides in enumerate(panels, start=1):
        p = cfg.model.replace(**overrides)
        init_kind, se_init = _amp_se_init(p, chi)

        def cell(seed):
            d = generate_dataset(p, seed)
            init = 0.05 * d.w0 if init_kind == "tilt" else init_kind
            rows = []
            run_amp(d, p, chi, init=init, eps=1e-15, max_iter=n_steps,
                    trajectory=rows)
            return rows

        results = _map_cells(lambda s: _guard(cell, s), cfg.seeds, threads)
        ks, vs = [], []
        for seed, (ok, payload) in zip(cfg.seeds, results):
            name = "panel%d,seed=%d" % (idx, seed)
            if not ok:
                status[name] = "failed: %s" % payload
                continue
            status[name] = "ok"
            ks.append([r[1] for r in payload])
            vs.append([r[2] for r in payload])
            if seed in cfg.seeds[:dump]:
                files.append(("amp_trajectory_panel%d_seed%d.csv"
                              % (idx, seed),
                              ("iter", "k", "v", "rel_change"), payload))
        if not ks:
            continue
        ks = np.asarray(ks)
        vs = np.asarray(vs)
        se = se_trajectory(p, chi, init=se_init, n_steps=n_steps, gh=gh)
        denom = np.sqrt(ks.shape[0])
        rows = []
        for t in range(n_steps + 1):
            rows.append((t, se[t].k, se[t].v,
                         float(ks[:, t].mean()),
                         float(ks[:, t].std(ddof=1) / denom),
                         float(vs[:, t].mean()),
                         float(vs[:, t].std(ddof=1) / denom)))
        files.append(("amp_se_panel%d.csv" % idx,
                      ("iter", "se_k", "se_v", "amp_k_mean", "amp_k_se",
                       "amp_v_mean", "amp_v_se"), rows))
        k_dev = max(abs(r[3] - r[1]) for r in rows)
        v_dev = max(abs(r[5] - r[2]) for r in rows)
        summary["panels"].append(
            {"panel": idx, "overrides": dict(overrides), "init": init_kind,
             "seeds": ks.shape[0], "max_k_dev": k_dev, "max_v_dev": v_dev})
    return files, summary, status


def _chi_for_descent(cfg, model, gh):
    lam = cfg.gd.lam if cfg.gd.lam is not None else model.lam
    p = model.replace(estimator_mode="rmle")
    return lam, chi_from_lambda(p, lam, branch="informed", eps=cfg.eps_se,
                                gh=gh)


def _run_gd_vs_amp(cfg, threads):
    mode = cfg.options.get("mode", "scaling")
    if mode == "scaling":
        return _gd_scaling(cfg, threads)
    if mode == "trajectory":
        return _gd_trajectory(cfg, threads)
    if mode == "sensitivity":
        return _gd_sensitivity(cfg, threads)
    raise ValueError("gd-vs-amp mode must be scaling, trajectory, "
                     "or sensitivity")


def _gd_pair(cfg, params, chi, n, seed, gd_cfg=None, trajectories=None):
    d = generate_dataset(params.replace(n_dim=int(n)), seed)
    amp_rows = trajectories[0] if trajectories else None
    state = run_amp(d, params, chi, init="supervised", eps=cfg.eps_amp,
                    trajectory=amp_rows)
    gd_rows = trajectories[1] if trajectories else None
    res = run_gd(d, gd_cfg or cfg.gd, params, trajectory=gd_rows)
    return d, state, res


def _gd_scaling(cfg, threads):
    rhos = cfg.options.get("rho_values") or [cfg.model.rho]
    n_values = tuple(int(n) for n in cfg.grid("n"))
    gh = _gauss_nodes(cfg)
    files, status, summary = [], {}, {"fits": []}

    for rho in rhos:
        model = cfg.model.replace(rho=float(rho), estimator_mode="rmle")
        lam, chi = _chi_for_descent(cfg, model, gh)
        gd_cfg = dataclasses.replace(cfg.gd, lam=lam)

        def cell(c):
            n, seed = c
            _, state, res = _gd_pair(cfg, model, chi, n, seed, gd_cfg)
            return (n, seed, delta_gd_amp(res.w_hat, state.w_hat),
                    res.iter, state.iter)

        cells = [(n, s) for n in n_values for s in cfg.seeds]
        rows, samples = [], {n: [] for n in n_values}
        for c, (ok, payload) in zip(cells,
                                    _map_cells(lambda c: _guard(cell, c),
                                               cells, threads)):
            name = "rho=%s,N=%d,seed=%d" % (_slug(rho), c[0], c[1])
            if ok:
                rows.append(payload)
                samples[payload[0]].append(payload[2])
                status[name] = "ok"
            else:
                rows.append((c[0], c[1], float("nan"), -1, -1))
                status[name] = "failed: %s" % payload
        files.append(("gd_vs_amp_rho%s.csv" % _slug(rho),
                      ("N", "seed", "delta", "iters_gd", "iters_amp"), rows))

        entry = {"rho": float(rho), "lambda": lam, "chi": chi}
        populated = {n: v for n, v in samples.items() if v}
        if len(populated) >= 3:
            fit = fit_power_law(populated)
            fit = attach_bootstrap(
                fit, populated,
                n_boot=int(cfg.options.get("n_boot", 1000)),
                seed=int(cfg.options.get("boot_seed", 0)))
            boot = np.asarray(fit.bootstrap_samples)
            entry.update(
                delta0=fit.delta0, amplitude=fit.a, exponent=fit.d,
                residual=fit.residual, degenerate=fit.degenerate,
                bootstrap_delta0_quartiles=[float(q) for q in
                                            np.percentile(boot, [25, 50, 75])])
        summary["fits"].append(entry)
    return files, summary, status


def _gd_trajectory(cfg, threads):
    gh = _gauss_nodes(cfg)
    base = cfg.model.replace(estimator_mode="rmle")
    rho_values = cfg.options.get("rho_values")
    variants = ([("_rho%s" % _slug(r), base.replace(rho=float(r)))
                 for r in rho_values] if rho_values else [("", base)])
    files, status = [], {}
    summary = {"runs": []}

    for suffix, model in variants:
        lam, chi = _chi_for_descent(cfg, model, gh)

        def cell(seed):
            amp_rows, gd_rows = [], []
            _, state, res = _gd_pair(cfg, model, chi, model.n_dim, seed,
                                     trajectories=(amp_rows, gd_rows))
            return amp_rows, gd_rows, state, res

        for seed, (ok, payload) in zip(cfg.seeds,
                                       _map_cells(lambda s: _guard(cell, s),
                                                  cfg.seeds, threads)):
            name = "rho=%s,seed=%d" % (_fmt(model.rho), seed)
            if not ok:
                status[name] = "failed: %s" % payload
                continue
            amp_rows, gd_rows, state, res = payload
            status[name] = "ok"
            files.append(("amp_trajectory%s_seed%d.csv" % (suffix, seed),
                          ("iter", "k", "v", "rel_change"), amp_rows))
            files.append(("gd_trajectory%s_seed%d.csv" % (suffix, seed),
                          ("iter", "k", "v", "rel_change"), gd_rows))
            summary["runs"].append(
                {"rho": model.rho, "lambda": lam, "chi": chi, "seed": seed,
                 "iters_amp": state.iter, "iters_gd": res.iter,
                 "delta": delta_gd_amp(res.w_hat, state.w_hat)})
    return files, summary, status


def _gd_sensitivity(cfg, threads):
    gh = _gauss_nodes(cfg)
    model = cfg.model.replace(estimator_mode="rmle")
    lam, chi = _chi_for_descent(cfg, model, gh)
    n_values = tuple(int(n) for n in cfg.grid("n"))
    files, status = [], {}

    def sweep(grid_name, fixed):
        rows = []
        for n in n_values:
            for seed in cfg.seeds:
                d = generate_dataset(model.replace(n_dim=n), seed)
                state = run_amp(d, model, chi, init="supervised",
                                eps=cfg.eps_amp)
                for value in cfg.grid(grid_name):
                    name = "%s=%s,N=%d,seed=%d" % (grid_name, _slug(value),
                                                   n, seed)
                    knobs = dict(fixed)
                    knobs[grid_name] = value
                    gd_cfg = GdConfig(eta=float(knobs["eta"]),
                                      eps_gd=float(knobs["eps_gd"]),
                                      max_iter=cfg.gd.max_iter, lam=lam)
                    try:
                        res = run_gd(d, gd_cfg, model)
                        rows.append((n, seed, float(value),
                                     delta_gd_amp(res.w_hat, state.w_hat),
                                     res.iter))
                        status[name] = "ok"
                    except GdDivergenceError as exc:
                        rows.append((n, seed, float(value), float("nan"),
                                     exc.iteration))
                        status[name] = "failed: %s" % exc
        return rows

    files.append(("delta_vs_eps.csv",
                  ("N", "seed", "eps_gd", "delta", "iters_gd"),
                  sweep("eps_gd", {"eta": cfg.gd.eta})))
    files.append(("delta_vs_eta.csv",
                  ("N", "seed", "eta", "delta", "iters_gd"),
                  sweep("eta", {"eps_gd": cfg.gd.eps_gd})))
    return files, {"lambda": lam, "chi": chi}, status


def _run_phase_diagram(cfg, threads):
    slices = cfg.options.get("slices") or [{}]
    chi_grid = cfg.grid("chi")
    alpha_grid = cfg.grid("alpha_u")
    files, status = [], {}
    summary = {"slices": []}

    for overrides in slices:
        p0 = cfg.model.replace(**overrides)
        tag = "_".join("%s%s" % (k, _slug(v))
                       for k, v in sorted(overrides.items()))
        fname = "phase_diagram%s.csv" % (("_" + tag) if tag else "")

        def cell(c):
            chi, au = c
            report = classify_phase(p0.replace(alpha_u=au), chi,
                                    eps=cfg.eps_se)
            return (chi, au, report.phase, report.k_star, report.v_star,
                    report.at_integral, report.k_lin, report.v_lin)

        cells = [(chi, au) for chi in chi_grid for au in alpha_grid]
        rows, counts = [], {}
        for c, (ok, payload) in zip(cells,
                                    _map_cells(lambda c: _guard(cell, c),
                                               cells, threads)):
            name = "%s:chi=%s,alpha_u=%s" % (fname, _slug(c[0]), _slug(c[1]))
            if ok:
                rows.append(payload)
                counts[payload[2]] = counts.get(payload[2], 0) + 1
            else:
                rows.append((c[0], c[1], "error") + (float("nan"),) * 5)
                status[name] = "failed: %s" % payload
        status[fname] = "ok"
        files.append((fname, ("chi", "alpha_u", "phase", "k_star", "v_star",
                              "at_integral", "k_lin", "v_lin"), rows))
        summary["slices"].append({"file": fname,
                                  "overrides": dict(overrides),
                                  "region_counts": counts})

    if cfg.options.get("nishimori"):
        p = cfg.model.replace(estimator_mode="bayes", lam=cfg.model.lambda0)
        locus = nishimori_line(p, alpha_grid, eps=cfg.eps_se)
        files.append(("nishimori.csv", ("alpha_u", "chi"),
                      [(a, c) for a, c in locus]))
        status["nishimori.csv"] = "ok"

    # Fixed-lambda loci across the same diagram: where a given regularization
    # strength sits in the chi-alpha_u plane, with the error and stability
    # it implies there.
    loci = cfg.options.get("lambda_loci") or []
    if loci:
        gh = _gauss_nodes(cfg)
        table_nodes = int(cfg.options.get("table_points", 61))
    for lam_v in loci:
        lam = float(lam_v)
        fname = "lambda_locus_%s.csv" % _slug(lam)

        def cell(au):
            p = cfg.model.replace(alpha_u=float(au))
            chi = _chi_at_lambda(p, lam, table_nodes, cfg.eps_se, gh)
            report = classify_phase(p, chi, eps=cfg.eps_se)
            mse = float(mse_from_order_params(report.k_star, report.v_star,
                                              p.lambda0))
            return (float(au), chi, mse, report.at_integral, report.phase)

        rows = []
        for au, (ok, payload) in zip(alpha_grid,
                                     _map_cells(lambda a: _guard(cell, a),
                                                alpha_grid, threads)):
            name = "%s:alpha_u=%s" % (fname, _slug(au))
            if ok:
                rows.append(payload)
            else:
                rows.append((float(au),) + (float("nan"),) * 3 + ("error",))
                status[name] = "failed: %s" % payload
        status[fname] = "ok"
        files.append((fname, ("alpha_u", "chi", "mse", "at_integral",
                              "phase"), rows))
    return files, summary, status


def _run_mse_heatmap(cfg, threads):
    lam_values = cfg.options.get("lam_values") or ["lambda0"]
    snr_grid = cfg.grid("snr")
    alpha_grid = cfg.grid("alpha_u")
    table_nodes = int(cfg.options.get("table_points", 61))
    gh = _gauss_nodes(cfg)
    files, status, summary = [], {}, {"panels": []}

    for lam_v in lam_values:
        def cell(c):
            snr, au = c
            sigma2 = 1.0 / (snr * cfg.model.lambda0)
            p = cfg.model.replace(sigma2=sigma2, alpha_u=au)
            lam = p.lambda0 if lam_v == "lambda0" else float(lam_v)
            chi = _chi_at_lambda(p, lam, table_nodes, cfg.eps_se, gh)
            res = se_fixed_point(p, chi, init="informed", eps=cfg.eps_se,
                                 gh=gh)
            return (snr, au,
                    float(mse_from_order_params(res.op.k, res.op.v,
                                                p.lambda0)))

        cells = [(snr, au) for snr in snr_grid for au in alpha_grid]
        fname = "mse_heatmap_lambda_%s.csv" % _slug(lam_v)
        rows = []
        for c, (ok, payload) in zip(cells,
                                    _map_cells(lambda c: _guard(cell, c),
                                               cells, threads)):
            name = "%s:snr=%s,alpha_u=%s" % (fname, _slug(c[0]), _slug(c[1]))
            if ok:
                rows.append(payload)
            else:
                rows.append((c[0], c[1], float("nan")))
                status[name] = "failed: %s" % payload
        status[fname] = "ok"
        files.append((fname, ("snr", "alpha_u", "mse"), rows))
        finite = [r[2] for r in rows if np.isfinite(r[2])]
        summary["panels"].append(
            {"file": fname, "lambda": str(lam_v),
             "mse_min": min(finite) if finite else float("nan"),
             "mse_max": max(finite) if finite else float("nan")})
    return files, summary, status


def _run_optimal_lambda(cfg, threads):
    metrics = cfg.options.get("metrics") or ["mse", "ge"]
    gh = _gauss_nodes(cfg)
    files, status, summary = [], {}, {"searches": []}

    if "snr" in cfg.grids:
        axes = [n for n in ("alpha_u", "rho") if n in cfg.grids]
        families = ([(a, v) for a in axes for v in cfg.grid(a)] if axes
                    else [(None, None)])
        check_points = int(cfg.options.get("check_points", 25))
        for metric in metrics:
            for fam_name, fam_value in families:
                overrides = {fam_name: fam_value} if fam_name else {}

                def cell(snr):
                    model = cfg.model.replace(
                        sigma2=1.0 / (snr * cfg.model.lambda0), **overrides)
                    res = _search_on_model(model, metric, cfg.eps_se, gh,
                                           check_points=check_points)
                    return (float(snr),
                            1.0 / res.lambda_star
                            if np.isfinite(res.lambda_star) else float("nan"),
                            res.error_at_star, res.bo_error, res.rel_gap,
                            res.flat_region)

                tag = "_%s_%s" % (fam_name, _slug(fam_value)) if fam_name \
                    else ""
                fname = "optimal_lambda_%s%s.csv" % (metric, tag)
                rows = []
                for snr, (ok, payload) in zip(
                        cfg.grid("snr"),
                        _map_cells(lambda s: _guard(cell, s),
                                   cfg.grid("snr"), threads)):
                    name = "%s:snr=%s" % (fname, _slug(snr))
                    if ok:
                        rows.append(payload)
                    else:
                        rows.append((snr,) + (float("nan"),) * 4 + (False,))
                        status[name] = "failed: %s" % payload
                status[fname] = "ok"
                files.append((fname, ("snr", "inv_lambda_star",
                                      "rmle_error", "bo_error", "rel_gap",
                                      "flat_region"), rows))
        return files, summary, status

    for metric in metrics:
        name = "metric=%s" % metric
        ok, payload = _guard(lambda m: search_optimal_lambda(cfg, m), metric)
        if not ok:
            status[name] = "failed: %s" % payload
            continue
        status[name] = "ok"
        res = payload
        files.append(("error_vs_inv_lambda_%s.csv" % metric,
                      ("inv_lambda", "rmle_error", "bo_error"),
                      [(x, y, res.bo_error) for x, y in res.curve]))
        summary["searches"].append(
            {"metric": metric, "lambda_star": res.lambda_star,
             "inv_lambda_star": 1.0 / res.lambda_star
             if np.isfinite(res.lambda_star) else float("nan"),
             "error_at_star": res.error_at_star, "bo_error": res.bo_error,
             "rel_gap": res.rel_gap,
             "flagged_non_unimodal": res.flagged_non_unimodal,
             "flat_region": res.flat_region})
    return files, summary, status


def _run_ge_curve(cfg, threads):
    metrics = cfg.options.get("metrics") or ["mse", "ge"]
    axes = [n for n in ("alpha_u", "rho") if n in cfg.grids]
    files, status, summary = [], {}, {"max_rel_gap": {}}
    for metric in metrics:
        per_axis = {}
        for axis in axes or [None]:
            name = "metric=%s" % metric + (",axis=%s" % axis if axis else "")
            sub = cfg if axis is None else dataclasses.replace(
                cfg, grids={k: v for k, v in cfg.grids.items()
                            if k in ("snr", axis)})
            ok, payload = _guard(lambda m: gap_curves(sub, m), metric)
            if not ok:
                status[name] = "failed: %s" % payload
                continue
            status[name] = "ok"
            columns, rows = payload
            files.append(("gap_curve_%s_%s.csv" % (metric, columns[1]),
                          columns, rows))
            gaps = [r[5] for r in rows if np.isfinite(r[5])]
            per_axis[columns[1]] = max(gaps) if gaps else float("nan")
        summary["max_rel_gap"][metric] = per_axis
    return files, summary, status


_RUNNERS = {
    "lambda-chi": _run_lambda_chi,
    "amp-vs-se": _run_amp_vs_se,
    "gd-vs-amp": _run_gd_vs_amp,
    "phase-diagram": _run_phase_diagram,
    "mse-heatmap": _run_mse_heatmap,
    "optimal-lambda": _run_optimal_lambda,
    "ge-curve": _run_ge_curve,
}


def _load_manifest(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, ValueError):
        return None


def run_experiment(cfg, threads=1, force=False):
    """Execute the named protocol and persist CSVs, summary, manifest.

    Cells that fail are recorded in the manifest status without aborting
    the sweep. When the output directory already holds a manifest with
    the same config digest and all its files, the run is skipped and the
    stored manifest returned (cached=True) unless force is set.
    """
    runner = _RUNNERS[cfg.experiment]
    digest = config_digest(cfg)
    os.makedirs(cfg.output_dir, exist_ok=True)
    manifest_path = os.path.join(cfg.output_dir, "manifest.json")

    if not force:
        prior = _load_manifest(manifest_path)
        if prior and prior.get("config_hash") == digest and all(
                os.path.exists(os.path.join(cfg.output_dir, f))
                for f in prior.get("outputs", [])):
            return RunManifest(
                config_hash=digest, version=prior.get("version", ""),
                started=prior.get("started", ""),
                finished=prior.get("finished", ""),
                status=prior.get("status", {}),
                outputs=tuple(prior.get("outputs", ())), cached=True)

    started = _utcnow()
    files, summary, status = runner(cfg, threads)
    outputs = []
    for fname, columns, rows in files:
        with open(os.path.join(cfg.output_dir, fname), "w") as fh:
            fh.write(_csv_text(columns, rows))
        outputs.append(fname)
    summary_doc = {"experiment": cfg.experiment, "config_hash": digest,
                   "summary": summary}
    with open(os.path.join(cfg.output_dir, "summary.json"), "w") as fh:
        json.dump(summary_doc, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    outputs.append("summary.json")

    manifest = RunManifest(config_hash=digest, version=__version__,
                           started=started, finished=_utcnow(),
                           status=status, outputs=tuple(sorted(outputs)))
    with open(manifest_path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
