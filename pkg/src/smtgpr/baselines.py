"""Comparison models: mass-univariate single-task GPs and the full Kronecker GP.

STGPR fits one GP per task with its own kernel parameters and its own noise
variance (heteroscedastic across tasks). MT-Kronprod models
``vec(Y) ~ N(0, D kron R + sigma2 I)`` with a full ``T x T`` task covariance
and uses the same eigenbasis tricks as S-MTGPR without the basis reduction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack

from .kernels import (
    LINEAR,
    SQUARED_EXPONENTIAL,
    GramCache,
    KernelParams,
    KernelSpec,
    eval_kernel,
    kernel_and_grads,
    kernel_diag,
    one_hot_features,
)
from .kronecker import EigenDecomposition, as_matrix, sym_eig
from .model import (
    LOG_2PI,
    ModelError,
    PredictiveDistribution,
    check_variance,
    kron_gradient,
    kron_likelihood,
    kron_predict,
    sample_kernels,
)
from .optimize import OptimizerSettings, minimize

log = logging.getLogger(__name__)

STGPR_KERNEL = KernelSpec((LINEAR, SQUARED_EXPONENTIAL))
MAX_KRONPROD_TASKS = 4096


# ---------------------------------------------------------------------------
# Single-task GP
# ---------------------------------------------------------------------------


def _cholesky(k):
    c, info = lapack.dpotrf(k, lower=1, clean=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"kernel matrix is not positive definite (dpotrf info={info})")
    return c


def _inverse_from_cholesky(c):
    kinv, info = lapack.dpotri(c, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"dpotri failed with info={info}")
    kinv = np.tril(kinv)
    return kinv + np.tril(kinv, -1).T


class SingleTaskObjective:
    """Log marginal likelihood of one output column under ``k(X, X) + sigma2 I``.

    Raw layout: the kernel's raw parameters followed by ``log sigma2``. The
    common linear + squared-exponential kernel takes a fast path that reuses
    the cached Gram and distance matrices directly; any other spec uses the
    generic kernel code.
    """

    def __init__(self, spec, cache, y):
        self.spec = spec
        self.cache = cache
        self.y = np.ascontiguousarray(y, dtype=np.float64)
        self.n = self.y.shape[0]
        self.fast = spec.terms == STGPR_KERNEL.terms

    @property
    def n_params(self):
        return self.spec.n_params + 1

    def _kernel(self, raw, grads):
        with np.errstate(over="ignore"):
            vals = np.exp(raw)
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
            raise ModelError("parameter overflow")
        noise = vals[-1]
        if self.fast:
            a, s, ell = vals[0], vals[1], vals[2]
            with np.errstate(over="ignore"):
                inv_ell2 = 1.0 / (ell * ell)
            if not np.isfinite(inv_ell2):
                raise ModelError("parameter overflow")
            se = np.exp(self.cache.sqdist * (-0.5 * inv_ell2))
            k = a * self.cache.gram + s * se
            k.flat[:: self.n + 1] += noise
            return k, se, None, vals
        if grads:
            k, dks = kernel_and_grads(self.spec, raw[:-1], self.cache)
        else:
            k = eval_kernel(self.spec, raw[:-1], self.cache)
            dks = None
        k.flat[:: self.n + 1] += noise
        return k, None, dks, vals

    def lml(self, raw):
        raw = np.asarray(raw, dtype=np.float64)
        k, _, _, _ = self._kernel(raw, grads=False)
        c = _cholesky(k)
        alpha, _ = lapack.dpotrs(c, self.y, lower=1)
        return -0.5 * float(self.y @ alpha) - float(np.sum(np.log(np.diag(c)))) - 0.5 * self.n * LOG_2PI

    def lml_and_grad(self, raw):
        raw = np.asarray(raw, dtype=np.float64)
        k, se, dks, vals = self._kernel(raw, grads=True)
        c = _cholesky(k)
        alpha, _ = lapack.dpotrs(c, self.y, lower=1)
        lml = -0.5 * float(self.y @ alpha) - float(np.sum(np.log(np.diag(c)))) - 0.5 * self.n * LOG_2PI
        # dL/dtheta = 1/2 tr((alpha alpha^T - K^-1) dK)
        w = np.outer(alpha, alpha)
        w -= _inverse_from_cholesky(c)
        if self.fast:
            a, s, ell, noise = vals
            wse = w * se
            g = 0.5 * np.array(
                [
                    a * np.vdot(w, self.cache.gram),
                    s * wse.sum(),
                    s * np.vdot(wse, self.cache.sqdist) * (1.0 / ell) ** 2,
                    noise * np.trace(w),
                ]
            )
        else:
            g = 0.5 * np.array([np.vdot(w, dk) for dk in dks] + [vals[-1] * np.trace(w)])
        return lml, g

    def negative(self, raw):
        lml, g = self.lml_and_grad(raw)
        return -lml, -g


@dataclass(frozen=True)
class StgprModel:
    """Per-task GP fits sharing the training inputs.

    ``raw`` is ``T x (n_kernel + 1)``: each row holds a task's kernel raw
    parameters followed by its ``log sigma2``. Rows of failed fits are NaN.
    """

    kernel: KernelSpec
    raw: np.ndarray
    train_x: np.ndarray
    train_y: np.ndarray
    lml: np.ndarray
    converged: np.ndarray
    failed: np.ndarray
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    warnings: tuple = ()

    @property
    def n_tasks(self):
        return self.raw.shape[0]

    @property
    def parameter_count(self):
        return int(self.raw.size)

    @property
    def noise_variance(self):
        return np.exp(self.raw[:, -1])

    @property
    def final_lml(self):
        return float(np.nansum(self.lml))

    def predict(self, x_star):
        return stgpr_predict(self, x_star)


def stgpr_parameter_count(n_tasks, kernel=STGPR_KERNEL):
    return int(n_tasks) * (KernelSpec.from_config(kernel).n_params + 1)


def stgpr_fit(x, y, kernel_spec=STGPR_KERNEL, optimizer=None, init_raw=None):
    """Fit ``T`` independent single-output GPs.

    A failing task is recorded (NaN parameters, ``failed`` flag, warning)
    and does not stop the others.
    """
    spec = KernelSpec.from_config(kernel_spec)
    settings = OptimizerSettings.from_config(optimizer)
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if x.shape[0] != y.shape[0]:
        raise ModelError(f"x has {x.shape[0]} rows but y has {y.shape[0]}")
    if y.shape[0] < 2:
        raise ModelError("need at least 2 training samples")
    n_par = spec.n_params + 1
    x0 = np.zeros(n_par) if init_raw is None else np.asarray(init_raw, dtype=np.float64)
    if x0.shape != (n_par,):
        raise ModelError(f"init_raw needs {n_par} entries")
    cache = GramCache(x)
    t = y.shape[1]
    raw = np.full((t, n_par), np.nan)
    lml = np.full(t, np.nan)
    converged = np.zeros(t, dtype=bool)
    failed = np.zeros(t, dtype=bool)
    warn = []
    for j in range(t):
        obj = SingleTaskObjective(spec, cache, y[:, j])
        try:
            res = minimize(obj.negative, x0, settings)
        except Exception as exc:  # isolate per-task failures
            failed[j] = True
            warn.append(f"task {j}: {type(exc).__name__}: {exc}")
            continue
        raw[j] = res.x
        lml[j] = -res.fun
        converged[j] = res.converged
    if failed.any():
        log.warning("STGPR: %d of %d task fits failed", int(failed.sum()), t)
    n_unconv = int((~converged & ~failed).sum())
    if n_unconv:
        warn.append(f"{n_unconv} task fits did not reach the gradient tolerance")
    return StgprModel(
        kernel=spec,
        raw=raw,
        train_x=x,
        train_y=y,
        lml=lml,
        converged=converged,
        failed=failed,
        optimizer=settings,
        warnings=tuple(warn),
    )


def stgpr_predict(model, x_star):
    """Per-task predictive means and variances; failed tasks come back as NaN."""
    x_star = as_matrix(x_star, "x_star")
    x = model.train_x
    if x_star.shape[1] != x.shape[1]:
        raise ModelError(f"x_star has {x_star.shape[1]} features, model was trained on {x.shape[1]}")
    train_cache = GramCache(x)
    cross = GramCache(x_star, x)
    n = x.shape[0]
    t = model.n_tasks
    mean = np.full((x_star.shape[0], t), np.nan)
    var = np.full((x_star.shape[0], t), np.nan)
    spec = model.kernel
    for j in range(t):
        if model.failed[j]:
            continue
        raw_k, log_noise = model.raw[j, :-1], model.raw[j, -1]
        k = eval_kernel(spec, raw_k, train_cache)
        k.flat[:: n + 1] += math.exp(log_noise)
        c = _cholesky(k)
        alpha, _ = lapack.dpotrs(c, model.train_y[:, j], lower=1)
        k_star = eval_kernel(spec, raw_k, cross)  # (N*, N)
        mean[:, j] = k_star @ alpha
        v, _ = lapack.dtrtrs(c, k_star.T, lower=1)
        col = kernel_diag(spec, raw_k, x_star) - np.einsum("ij,ij->j", v, v)
        var[:, j] = check_variance(col, np.max(np.abs(np.diag(k))))
    return PredictiveDistribution(mean=mean, variance_diag=var, noise_variance=model.noise_variance)


# ---------------------------------------------------------------------------
# MT-Kronprod
# ---------------------------------------------------------------------------


class MtKronprodObjective:
    """Log marginal likelihood of ``D kron R + sigma2 I`` for fixed data.

    Raw layout: ``[task kernel, sample kernel, log sigma2]``.
    """

    def __init__(self, task_kernel, sample_kernel, x, y, task_features=None, max_tasks=MAX_KRONPROD_TASKS):
        self.task_kernel = KernelSpec.from_config(task_kernel)
        self.sample_kernel = KernelSpec.from_config(sample_kernel)
        self.x = as_matrix(x, "x")
        self.y = as_matrix(y, "y")
        if self.x.shape[0] != self.y.shape[0]:
            raise ModelError(f"x has {self.x.shape[0]} rows but y has {self.y.shape[0]}")
        self.n, self.t = self.y.shape
        if self.t > max_tasks:
            raise ModelError(f"MT-Kronprod with T={self.t} exceeds the T <= {max_tasks} guard")
        if task_features is None:
            task_features = one_hot_features(self.t)
        task_features = as_matrix(task_features, "task_features")
        if task_features.shape[0] != self.t:
            raise ModelError(f"task_features needs {self.t} rows, got {task_features.shape[0]}")
        self.task_features = task_features
        self.task_cache = GramCache(task_features)
        self.sample_cache = GramCache(self.x)

    @property
    def n_params(self):
        return self.task_kernel.n_params + self.sample_kernel.n_params + 1

    def split(self, raw):
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape != (self.n_params,):
            raise ModelError(f"raw parameter vector must have length {self.n_params}")
        nd = self.task_kernel.n_params
        nr = self.sample_kernel.n_params
        return raw[:nd], raw[nd : nd + nr], float(raw[nd + nr])

    def _parts(self, raw, grads):
        raw_d, raw_r, log_s2 = self.split(raw)
        sigma2 = math.exp(log_s2)
        if grads:
            d, dd = kernel_and_grads(self.task_kernel, raw_d, self.task_cache)
            r, dr = kernel_and_grads(self.sample_kernel, raw_r, self.sample_cache)
        else:
            d = eval_kernel(self.task_kernel, raw_d, self.task_cache)
            r = eval_kernel(self.sample_kernel, raw_r, self.sample_cache)
            dd = dr = None
        eig_d = sym_eig(d, clamp=True)
        eig_r = sym_eig(r, clamp=True)
        terms = kron_likelihood(eig_d, eig_r, self.y, sigma2)
        return terms, eig_d, eig_r, dd, dr, sigma2

    def terms(self, raw):
        terms, eig_d, eig_r, _, _, sigma2 = self._parts(raw, grads=False)
        return terms, eig_d, eig_r, sigma2

    def lml(self, raw):
        return self._parts(raw, grads=False)[0].lml

    def lml_and_grad(self, raw):
        terms, eig_d, eig_r, dd, dr, sigma2 = self._parts(raw, grads=True)
        return terms.lml, kron_gradient(terms, eig_d, eig_r, dd, dr, sigma2)

    def negative(self, raw):
        lml, g = self.lml_and_grad(raw)
        return -lml, -g


@dataclass(frozen=True)
class MtKronprodModel:
    task_kernel: KernelSpec
    sample_kernel: KernelSpec
    theta_d: KernelParams
    theta_r: KernelParams
    theta_sigma2: float
    train_x: np.ndarray
    task_features: np.ndarray
    eig_d: EigenDecomposition
    eig_r: EigenDecomposition
    k_tilde_inv_diag: np.ndarray
    y_tilde: np.ndarray
    final_lml: float
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    variance_batch: int = 256
    initial_lml: float = float("nan")
    n_iter: int = 0
    n_eval: int = 0
    converged: bool = True
    floor_count: int = 0
    warnings: tuple = ()

    @property
    def sigma2(self):
        return math.exp(self.theta_sigma2)

    @property
    def raw(self):
        return np.concatenate([self.theta_d.raw, self.theta_r.raw, [self.theta_sigma2]])

    @property
    def parameter_count(self):
        return self.task_kernel.n_params + self.sample_kernel.n_params + 1

    def predict(self, x_star, batch=None):
        return mtkronprod_predict(self, x_star, batch=batch)


def _assemble_kronprod(obj, raw, optimizer, variance_batch, **meta):
    terms, eig_d, eig_r, _ = obj.terms(raw)
    raw_d, raw_r, log_s2 = obj.split(raw)
    warn = list(meta.pop("warnings", ()))
    if terms.n_floor:
        warn.append(f"{terms.n_floor} shifted eigenvalues floored")
    return MtKronprodModel(
        task_kernel=obj.task_kernel,
        sample_kernel=obj.sample_kernel,
        theta_d=KernelParams(raw_d),
        theta_r=KernelParams(raw_r),
        theta_sigma2=log_s2,
        train_x=obj.x,
        task_features=obj.task_features,
        eig_d=eig_d,
        eig_r=eig_r,
        k_tilde_inv_diag=terms.kinv.reshape(-1, order="F"),
        y_tilde=terms.y_tilde,
        final_lml=terms.lml,
        optimizer=optimizer,
        variance_batch=int(variance_batch),
        floor_count=terms.n_floor,
        warnings=tuple(warn),
        **meta,
    )


def build_mtkronprod(raw, x, y, task_features=None, task_kernel=None, sample_kernel=None, variance_batch=256):
    """MT-Kronprod model at fixed raw parameters (no optimization)."""
    obj = MtKronprodObjective(task_kernel or KernelSpec(), sample_kernel or KernelSpec(), x, y, task_features)
    return _assemble_kronprod(obj, np.asarray(raw, dtype=np.float64), OptimizerSettings(), variance_batch)


def mtkronprod_fit(
    x,
    y,
    task_features=None,
    task_kernel=None,
    sample_kernel=None,
    optimizer=None,
    init_raw=None,
    max_tasks=MAX_KRONPROD_TASKS,
    variance_batch=256,
):
    """Maximize the MT-Kronprod marginal likelihood.

    Task features default to one-hot rows of ``I_T``.
    """
    settings = OptimizerSettings.from_config(optimizer)
    obj = MtKronprodObjective(
        task_kernel or KernelSpec(), sample_kernel or KernelSpec(), x, y, task_features, max_tasks
    )
    if obj.n < 2:
        raise ModelError("need at least 2 training samples")
    x0 = np.zeros(obj.n_params) if init_raw is None else np.asarray(init_raw, dtype=np.float64)
    if x0.shape != (obj.n_params,):
        raise ModelError(f"init_raw needs {obj.n_params} entries")
    initial = obj.lml(x0)
    res = minimize(obj.negative, x0, settings)
    warn = [] if res.converged else [f"optimizer did not converge: {res.message}"]
    model = _assemble_kronprod(
        obj,
        res.x,
        settings,
        variance_batch,
        initial_lml=initial,
        n_iter=res.n_iter,
        n_eval=res.n_eval,
        converged=res.converged,
        warnings=warn,
    )
    log.info("MT-Kronprod T=%d: L %.6g -> %.6g in %d iterations", obj.t, initial, model.final_lml, res.n_iter)
    return model


def mtkronprod_predict(model, x_star, batch=None):
    x_star, r_star, r_ss_diag = sample_kernels(model.sample_kernel, model.theta_r, model.train_x, x_star)
    n, t = model.train_x.shape[0], model.task_features.shape[0]
    mean, var = kron_predict(
        r_star,
        r_ss_diag,
        model.eig_d,
        model.eig_r,
        model.k_tilde_inv_diag.reshape((n, t), order="F"),
        model.y_tilde,
        basis=None,
        batch=int(batch or model.variance_batch),
    )
    return PredictiveDistribution(mean=mean, variance_diag=var, noise_variance=model.sigma2)
