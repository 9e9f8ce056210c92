"""Error measures derived from the order parameters.

The estimation error is pure algebra in (k, v). The prediction error of
the plug-in classifier on a fresh sample is a two-term Gaussian tail
expression whose offset b absorbs the class imbalance. predict_label
applies the same decision rule to concrete feature vectors, so the
closed form can be validated by direct misclassification counting.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .potentials import _bias, gaussian_tail_q


def decision_offset(params):
    """Offset b of the decision rule; infinite for a one-class prior."""
    if params.rho <= 0.0:
        return -np.inf
    if params.rho >= 1.0:
        return np.inf
    return params.sigma2 * _bias(params.rho)


def mse_from_order_params(k, v, lambda0):
    """Per-coordinate squared error of the estimate: (k-1)^2/lambda0 + v."""
    if not lambda0 > 0.0:
        raise ValueError("lambda0 must be positive")
    if v < 0.0:
        raise ValueError("v must be nonnegative")
    return (k - 1.0) ** 2 / lambda0 + v


def ge_from_order_params(k, v, params):
    """Misclassification probability of the plug-in rule on a fresh sample.

    The decision variable is Gaussian with class-dependent mean
    +-k/lambda0 + b and variance sigma2*(k^2/lambda0 + v); both order
    parameters at zero leave it degenerate, which is rejected.
    """
    if v < 0.0:
        raise ValueError("v must be nonnegative")
    var = params.sigma2 * (k * k / params.lambda0 + v)
    if not var > 0.0:
        raise ValueError("degenerate decision variable at k = v = 0")
    sd = np.sqrt(var)
    b = decision_offset(params)
    mu = k / params.lambda0
    return float(params.rho * gaussian_tail_q((mu + b) / sd)
                 + (1.0 - params.rho) * gaussian_tail_q((mu - b) / sd))


def predict_label(w_hat, x_new, params):
    """Classify fresh feature vectors with sign(w_hat.x/sqrt(N) + b).

    Accepts a single vector or a matrix of row vectors; a score of
    exactly zero is broken toward +1. Returns an int or an int array.
    """
    w = np.asarray(w_hat, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("w_hat must be a nonempty vector")
    x = np.asarray(x_new, dtype=float)
    if x.shape[-1] != w.shape[0] or x.size == 0:
        raise ValueError("feature dimension does not match w_hat")
    score = x @ w / np.sqrt(w.shape[0]) + decision_offset(params)
    labels = np.where(score >= 0.0, 1, -1)
    return int(labels) if x.ndim == 1 else labels


@dataclasses.dataclass(frozen=True)
class ErrorReport:
    """Both error measures at one (k, v) point, with the inputs used."""
    mse: float
    ge: float
    k: float
    v: float
    b: float


def error_report(k, v, params):
    """Bundle MSE and GE for (k, v) under the given model."""
    return ErrorReport(
        mse=float(mse_from_order_params(k, v, params.lambda0)),
        ge=ge_from_order_params(k, v, params),
        k=float(k), v=float(v), b=float(decision_offset(params)))
