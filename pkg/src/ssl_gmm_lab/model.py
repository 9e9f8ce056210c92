"""Model parameters and synthetic two-cluster dataset generation.

Features are x = y * w0 / sqrt(N) + noise with hidden labels y = +-1 drawn
with probability rho, the center w0 drawn from a zero-mean Gaussian with
variance 1/lambda0 per coordinate, and noise variance sigma2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# independent, reproducible substreams per dataset seed
_STREAM_W0 = 0
_STREAM_LABELS_L = 1
_STREAM_LABELS_U = 2
_STREAM_NOISE_L = 3
_STREAM_NOISE_U = 4

_MODES = ("rmle", "bayes")


def stream_rng(seed, stream_id):
    """Counter-based generator for (seed, stream_id), stable across platforms."""
    ss = np.random.SeedSequence((int(seed), int(stream_id)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class ModelParams:
    """Static description of one estimation problem.

    lam is the assumed prior precision used by the estimator (the
    regularization strength); lambda0 is the precision that generated w0.
    estimator_mode selects the zero-temperature maximizer ("rmle") or the
    posterior mean ("bayes").
    """
    rho: float = 0.5
    lambda0: float = 1.0
    lam: float = 1.0
    sigma2: float = 1.0
    alpha_l: float = 0.0
    alpha_u: float = 0.0
    n_dim: int = 1000
    estimator_mode: str = "rmle"

    def __post_init__(self):
        object.__setattr__(self, "estimator_mode", str(self.estimator_mode).lower())
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.lambda0 <= 0.0 or self.lam <= 0.0 or self.sigma2 <= 0.0:
            raise ValueError("precisions and variances must be positive")
        if self.alpha_l < 0.0 or self.alpha_u < 0.0:
            raise ValueError("sample ratios must be nonnegative")
        if int(self.n_dim) <= 0 or int(self.n_dim) != self.n_dim:
            raise ValueError("n_dim must be a positive integer")
        object.__setattr__(self, "n_dim", int(self.n_dim))
        if self.estimator_mode not in _MODES:
            raise ValueError("estimator_mode must be one of %s" % (_MODES,))

    @property
    def alpha(self):
        return self.alpha_l + self.alpha_u

    @property
    def snr(self):
        return 1.0 / (self.lambda0 * self.sigma2)

    @property
    def m_labeled(self):
        return int(np.rint(self.alpha_l * self.n_dim))

    @property
    def m_unlabeled(self):
        return int(np.rint(self.alpha_u * self.n_dim))

    @classmethod
    def from_dict(cls, d):
        """Build from a plain mapping; accepts 'lambda' as a key for lam."""
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {"rho", "lambda0", "lam", "sigma2", "alpha_l", "alpha_u",
                 "n_dim", "estimator_mode"}
        unknown = set(d) - known
        if unknown:
            raise ValueError("unknown model keys: %s" % sorted(unknown))
        return cls(**d)

    def to_dict(self):
        return {
            "rho": self.rho, "lambda0": self.lambda0, "lambda": self.lam,
            "sigma2": self.sigma2, "alpha_l": self.alpha_l,
            "alpha_u": self.alpha_u, "n_dim": self.n_dim,
            "estimator_mode": self.estimator_mode,
        }

    def replace(self, **kw):
        d = self.to_dict()
        if "lam" in kw:
            kw["lambda"] = kw.pop("lam")
        d.update(kw)
        return ModelParams.from_dict(d)


@dataclass(frozen=True)
class Dataset:
    """Immutable labeled/unlabeled sample with its generating ground truth."""
    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray
    y_hidden: np.ndarray
    w0: np.ndarray
    seed: int


def generate_dataset(params, seed):
    """Draw one dataset; identical (params, seed) gives bit-identical arrays."""
    n = params.n_dim
    if n <= 0:
        raise ValueError("n_dim must be positive")
    if not 0.0 <= params.rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    m_l, m_u = params.m_labeled, params.m_unlabeled
    w0 = stream_rng(seed, _STREAM_W0).normal(
        0.0, np.sqrt(1.0 / params.lambda0), n)
    y_l = np.where(stream_rng(seed, _STREAM_LABELS_L).random(m_l) < params.rho,
                   1.0, -1.0)
    y_u = np.where(stream_rng(seed, _STREAM_LABELS_U).random(m_u) < params.rho,
                   1.0, -1.0)
    sig = np.sqrt(params.sigma2)
    x_l = np.outer(y_l, w0) / np.sqrt(n) + \
        stream_rng(seed, _STREAM_NOISE_L).normal(0.0, sig, (m_l, n))
    x_u = np.outer(y_u, w0) / np.sqrt(n) + \
        stream_rng(seed, _STREAM_NOISE_U).normal(0.0, sig, (m_u, n))
    for arr in (w0, y_l, y_u, x_l, x_u):
        arr.setflags(write=False)
    return Dataset(x_labeled=x_l, y_labeled=y_l, x_unlabeled=x_u,
                   y_hidden=y_u, w0=w0, seed=int(seed))


def empirical_signal_variance(dataset):
    """(1/N) * sum_j w0_j**2 for the dataset's true center."""
    w0 = dataset.w0
    return float(np.dot(w0, w0) / w0.shape[0])


def _fmt(v):
    # shortest round-trip decimal form, so equal runs write equal bytes
    return repr(float(v))


def dataset_to_csv(dataset, path, reveal_hidden=False):
    """Write the dataset as rows `row_type,label,feature_0..feature_{N-1}`.

    Row types: W0 (true center, no label), L (labeled), U (unlabeled; the
    hidden label is written only when reveal_hidden is set).
    """
    n = dataset.w0.shape[0]
    header = "row_type,label," + ",".join("feature_%d" % j for j in range(n))
    lines = [header]
    lines.append("W0,," + ",".join(_fmt(v) for v in dataset.w0))
    for y, row in zip(dataset.y_labeled, dataset.x_labeled):
        lines.append("L,%d," % int(y) + ",".join(_fmt(v) for v in row))
    for y, row in zip(dataset.y_hidden, dataset.x_unlabeled):
        lab = "%d" % int(y) if reveal_hidden else ""
        lines.append("U,%s," % lab + ",".join(_fmt(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
