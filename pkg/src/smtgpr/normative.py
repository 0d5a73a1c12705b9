"""Normative probability maps, extreme-value abnormality scores and metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .kronecker import as_matrix

EULER_GAMMA = 0.5772156649015329
MIN_GEV_SAMPLES = 20
ROBUST_MEANS = ("trimmed", "mean", "median")


class NormativeError(ValueError):
    pass


@dataclass(frozen=True)
class NpmMatrix:
    """``N* x T`` z-statistics; columns of failed tasks are NaN."""

    values: np.ndarray

    @property
    def masked_tasks(self):
        return int(np.sum(np.all(np.isnan(self.values), axis=0)))


def compute_npm(y_true, pred):
    """``(y - mean) / sqrt(var + noise)`` per sample and task.

    ``pred.noise_variance`` may be a scalar (shared noise) or a length-``T``
    vector (per-task noise).
    """
    y = as_matrix(y_true, "y_true")
    mean = np.asarray(pred.mean, dtype=np.float64)
    var = np.asarray(pred.variance_diag, dtype=np.float64)
    if mean.shape != y.shape or var.shape != y.shape:
        raise NormativeError(f"prediction shape {mean.shape} does not match y_true {y.shape}")
    noise = np.asarray(pred.noise_variance, dtype=np.float64)
    if noise.ndim == 1 and noise.shape[0] != y.shape[1]:
        raise NormativeError(f"per-task noise has {noise.shape[0]} entries, expected {y.shape[1]}")
    total = var + noise
    valid = ~np.isnan(total)
    if np.any(total[valid] <= 0.0):
        raise NormativeError("total predictive variance must be positive")
    with np.errstate(invalid="ignore"):
        return NpmMatrix((y - mean) / np.sqrt(total))


def abnormality_score(npm, top_fraction=0.05, mode="trimmed", trim=0.1):
    """Robust mean of the largest ``ceil(top_fraction * T)`` ``|NPM|`` values per sample.

    ``mode`` is ``"trimmed"`` (drop ``int(trim * k)`` entries from each end
    of the selected set), ``"mean"`` or ``"median"``. NaN cells are skipped
    and ``T`` counts only the finite cells of each row.
    """
    values = npm.values if isinstance(npm, NpmMatrix) else as_matrix(npm, "npm", allow_nan=True)
    if not 0.0 < top_fraction <= 1.0:
        raise NormativeError(f"top_fraction must lie in (0, 1], got {top_fraction}")
    if not 0.0 <= trim < 0.5:
        raise NormativeError(f"trim must lie in [0, 0.5), got {trim}")
    if values.shape[1] * top_fraction < 1.0 - 1e-9:
        raise NormativeError(f"top_fraction * T = {values.shape[1] * top_fraction:.3g} selects no voxel")
    if mode not in ROBUST_MEANS:
        raise NormativeError(f"unknown robust mean {mode!r}; expected one of {ROBUST_MEANS}")
    finite = np.isfinite(values)
    n_valid = finite.sum(axis=1)
    if np.any(n_valid == 0):
        raise NormativeError("NPM row with no finite entry")
    # NaN cells sort last once mapped to -inf and negated
    mags = np.where(finite, np.abs(values), -np.inf)
    top = -np.sort(-mags, axis=1)
    k = np.maximum(1, np.ceil(top_fraction * n_valid - 1e-9).astype(np.int64))
    if mode == "median":
        return np.array([np.median(row[:ki]) for row, ki in zip(top, k)])
    cut = (trim * k).astype(np.int64) if mode == "trimmed" else np.zeros_like(k)
    rank = np.arange(top.shape[1])
    keep = (rank >= cut[:, None]) & (rank < (k - cut)[:, None])
    return np.where(keep, top, 0.0).sum(axis=1) / (k - 2 * cut)


# ---------------------------------------------------------------------------
# Generalized extreme value distribution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GevdFit:
    """GEV parameters in the ``xi`` sign convention (``xi > 0``: heavy upper tail).

    scipy's ``genextreme`` uses ``c = -xi``.
    """

    shape: float
    location: float
    scale: float
    log_likelihood: float
    n: int

    def cdf(self, x):
        return gev_cdf(x, self.shape, self.location, self.scale)


def gev_nll(x, xi, mu, log_sigma):
    """GEV negative log-likelihood; ``inf`` outside the support."""
    sigma = math.exp(log_sigma)
    z = (x - mu) / sigma
    if abs(xi) < 1e-8:
        return x.size * log_sigma + float(np.sum(z + np.exp(-z)))
    t = 1.0 + xi * z
    if np.any(t <= 0.0):
        return math.inf
    logt = np.log(t)
    return x.size * log_sigma + (1.0 + 1.0 / xi) * float(logt.sum()) + float(np.exp(-logt / xi).sum())


def gev_cdf(x, xi, mu, sigma):
    x = np.asarray(x, dtype=np.float64)
    z = (x - mu) / sigma
    if abs(xi) < 1e-8:
        with np.errstate(over="ignore"):
            return np.exp(-np.exp(-z))
    t = 1.0 + xi * z
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        out = np.exp(-np.power(np.maximum(t, 0.0), -1.0 / xi))
    # outside the support: below the lower bound (xi > 0) or above the upper bound (xi < 0)
    outside = t <= 0.0
    out = np.where(outside, 0.0 if xi > 0 else 1.0, out)
    return out if out.ndim else float(out)


def fit_gevd(scores):
    """Maximum-likelihood GEV fit by Nelder-Mead.

    The data are standardized first, so the fit is equivariant under
    positive affine maps up to floating-point rounding. A few shape starts
    are tried and the best local optimum is kept.
    """
    x = np.asarray(scores, dtype=np.float64).ravel()
    if x.size < MIN_GEV_SAMPLES:
        raise NormativeError(f"GEV fit needs at least {MIN_GEV_SAMPLES} samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise NormativeError("GEV fit requires finite scores")
    center = float(x.mean())
    spread = float(x.std())
    if spread <= 0.0 or np.ptp(x) == 0.0:
        raise NormativeError("GEV fit on a constant sample")
    z = (x - center) / spread

    def nll(v):
        return gev_nll(z, v[0], v[1], v[2])

    s0 = math.sqrt(6.0) / math.pi
    best = None
    for xi0 in (0.0, 0.1, -0.1):
        start = np.array([xi0, -EULER_GAMMA * s0, math.log(s0)])
        # out-of-support vertices are inf; the simplex spread test then sees inf - inf
        with np.errstate(invalid="ignore"):
            res = optimize.minimize(
                nll,
                start,
                method="Nelder-Mead",
                options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000, "maxfev": 40000},
            )
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise NormativeError("GEV optimizer failed from every start")
    xi, mu_z, log_s = best.x
    ll = -(best.fun + x.size * math.log(spread))
    if not math.isfinite(ll):
        raise NormativeError("GEV fit log-likelihood is not finite")
    return GevdFit(
        shape=float(xi),
        location=center + spread * float(mu_z),
        scale=spread * math.exp(log_s),
        log_likelihood=float(ll),
        n=int(x.size),
    )


def abnormality_probability(fit, score):
    """GEV CDF of ``score`` under ``fit``; works elementwise on arrays."""
    return gev_cdf(score, fit.shape, fit.location, fit.scale)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def auc(scores_normal, scores_abnormal):
    """ROC AUC as the Mann-Whitney statistic, ties counted as one half."""
    neg = np.asarray(scores_normal, dtype=np.float64).ravel()
    pos = np.asarray(scores_abnormal, dtype=np.float64).ravel()
    if neg.size == 0 or pos.size == 0:
        raise NormativeError("AUC needs at least one score in each class")
    if not (np.all(np.isfinite(neg)) and np.all(np.isfinite(pos))):
        raise NormativeError("AUC scores must be finite")
    ranks = stats.rankdata(np.concatenate([pos, neg]))
    u = float(ranks[: pos.size].sum()) - pos.size * (pos.size + 1) / 2.0
    return u / (pos.size * neg.size)


@dataclass(frozen=True)
class RSquared:
    per_task: np.ndarray
    mean: float
    masked: int


def r_squared(y_true, y_pred):
    """Per-task ``1 - SSE / SST`` with SST about the true column mean.

    Tasks with zero true variance or NaN predictions are NaN and left out
    of the average.
    """
    y = as_matrix(y_true, "y_true")
    yp = np.asarray(y_pred, dtype=np.float64)
    if yp.shape != y.shape:
        raise NormativeError(f"y_pred shape {yp.shape} does not match y_true {y.shape}")
    resid = y - yp
    sse = np.einsum("ij,ij->j", resid, resid)
    dev = y - y.mean(axis=0)
    sst = np.einsum("ij,ij->j", dev, dev)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = 1.0 - sse / sst
    r2[~(sst > 0.0)] = np.nan
    r2[~np.isfinite(sse)] = np.nan
    valid = ~np.isnan(r2)
    mean = float(r2[valid].mean()) if valid.any() else float("nan")
    return RSquared(per_task=r2, mean=mean, masked=int((~valid).sum()))
