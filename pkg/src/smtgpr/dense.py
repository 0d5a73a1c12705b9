"""Naive dense reference: materializes the full ``NT x NT`` covariance.

Used only to check the eigenbasis formulas on small problems. It shares
no linear algebra with the efficient path (Cholesky solves instead of
eigendecompositions, explicit Kronecker products instead of reshapes).
"""

from __future__ import annotations

import math

import numpy as np
from scipy import linalg

from .kernels import eval_kernel
from .kronecker import as_matrix, vec
from .model import ModelError, PredictiveDistribution, SmtgprObjective

MAX_DENSE_SIZE = 2000


def _guard(size):
    if size > MAX_DENSE_SIZE:
        raise ModelError(f"dense oracle refused: N*T = {size} exceeds {MAX_DENSE_SIZE}")


def dense_lml(d_tilde, r, sigma2, y):
    """``ln N(vec(Y) | 0, D~ kron R + sigma2 I)``."""
    y = as_matrix(y, "y")
    _guard(y.size)
    k = np.kron(d_tilde, r) + sigma2 * np.eye(y.size)
    cf = linalg.cho_factor(k, lower=True)
    v = vec(y)
    alpha = linalg.cho_solve(cf, v)
    logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    return -0.5 * y.size * math.log(2 * math.pi) - 0.5 * logdet - 0.5 * float(v @ alpha)


def dense_predict(d_tilde, r, r_star, r_ss, sigma2, y):
    """Predictive mean (``N* x T``) and full covariance from the textbook GP formulas."""
    y = as_matrix(y, "y")
    _guard(y.size)
    t = d_tilde.shape[0]
    _guard(r_star.shape[0] * t)
    k = np.kron(d_tilde, r) + sigma2 * np.eye(y.size)
    cf = linalg.cho_factor(k, lower=True)
    k_star = np.kron(d_tilde, r_star)  # (N* T, N T)
    mean_vec = k_star @ linalg.cho_solve(cf, vec(y))
    cov = np.kron(d_tilde, r_ss) - k_star @ linalg.cho_solve(cf, k_star.T)
    mean = mean_vec.reshape((r_star.shape[0], t), order="F")
    return mean, cov


def dense_oracle_lml_and_predict(config, basis, raw, x, y, x_star=None, task_features=None):
    """Dense log marginal likelihood and (optionally) predictions for S-MTGPR.

    Returns ``(lml, prediction, covariance)``; the last two are ``None``
    when ``x_star`` is not given.
    """
    obj = SmtgprObjective(config, basis, x, y, task_features)
    _guard(obj.n * obj.t)
    raw_c, raw_r, log_s2 = config.split(raw)
    c = eval_kernel(config.task_kernel, raw_c, obj.task_features)
    r = eval_kernel(config.sample_kernel, raw_r, obj.x)
    sigma2 = math.exp(log_s2)
    d_tilde = basis.b @ c @ basis.b.T
    y = as_matrix(y, "y")
    lml = dense_lml(d_tilde, r, sigma2, y)
    if x_star is None:
        return lml, None, None
    x_star = as_matrix(x_star, "x_star")
    r_star = eval_kernel(config.sample_kernel, raw_r, x_star, obj.x)
    r_ss = eval_kernel(config.sample_kernel, raw_r, x_star)
    mean, cov = dense_predict(d_tilde, r, r_star, r_ss, sigma2, y)
    var = np.diag(cov).reshape(mean.shape, order="F").copy()
    return lml, PredictiveDistribution(mean=mean, variance_diag=var, noise_variance=sigma2), cov
