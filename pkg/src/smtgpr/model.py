"""Scalable multi-task GP regression with a low-rank orthonormal task basis.

The joint covariance of ``vec(Y)`` (``Y`` is ``N x T``) is

    K = (B C B^T) kron R + sigma2 * I

with ``B`` a ``T x P`` orthonormal basis, ``C`` a ``P x P`` task covariance
and ``R`` an ``N x N`` sample covariance. With ``C = U_C S_C U_C^T`` and
``R = U_R S_R U_R^T``, ``K`` is diagonalized by ``[B U_C, B_perp] kron U_R``:
the ``N*P`` eigenvalues ``s_c[p] s_r[n] + sigma2`` live in the basis span and
the remaining ``N*(T-P)`` equal ``sigma2``. Nothing of size ``NT x NT`` is
ever formed; the likelihood needs ``Z = Y B``, the energy of ``Y`` outside
the span, and the two small eigendecompositions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .basis import OrthogonalBasis, fit_basis, orthogonal_complement_energy, project
from .kernels import GramCache, KernelParams, KernelSpec, eval_kernel, kernel_and_grads, kernel_diag, one_hot_features
from .kronecker import KTILDE_FLOOR, EigenDecomposition, as_matrix, kron_shift_inverse_diag, sym_eig, unvec
from .optimize import OptimizerSettings, minimize

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
NEGATIVE_VARIANCE_TOL = 1e-8


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Settings for one S-MTGPR fit.

    ``init_raw`` uses the full raw layout ``[task kernel, sample kernel,
    log sigma2]``; ``None`` starts every raw parameter at 0.
    """

    sample_kernel: KernelSpec = field(default_factory=KernelSpec)
    task_kernel: KernelSpec = field(default_factory=KernelSpec)
    p: int = 10
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    init_raw: tuple | None = None
    variance_batch: int = 256

    def __post_init__(self):
        object.__setattr__(self, "sample_kernel", KernelSpec.from_config(self.sample_kernel))
        object.__setattr__(self, "task_kernel", KernelSpec.from_config(self.task_kernel))
        object.__setattr__(self, "optimizer", OptimizerSettings.from_config(self.optimizer))
        if int(self.p) < 1:
            raise ModelError("p must be >= 1")
        if int(self.variance_batch) < 1:
            raise ModelError("variance_batch must be >= 1")
        object.__setattr__(self, "p", int(self.p))
        object.__setattr__(self, "variance_batch", int(self.variance_batch))
        if self.init_raw is not None:
            init = tuple(float(v) for v in np.ravel(self.init_raw))
            if len(init) != self.n_params:
                raise ModelError(f"init_raw has {len(init)} entries, layout needs {self.n_params}")
            object.__setattr__(self, "init_raw", init)

    @property
    def n_params(self):
        """Optimizable raw parameters."""
        return self.task_kernel.n_params + self.sample_kernel.n_params + 1

    @property
    def parameter_count(self):
        """Optimizable parameters plus the basis size hyperparameter."""
        return self.n_params + 1

    def initial_raw(self):
        if self.init_raw is None:
            return np.zeros(self.n_params)
        return np.asarray(self.init_raw, dtype=np.float64)

    def split(self, raw):
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape != (self.n_params,):
            raise ModelError(f"raw parameter vector must have length {self.n_params}, got {raw.shape}")
        nc = self.task_kernel.n_params
        nr = self.sample_kernel.n_params
        return raw[:nc], raw[nc : nc + nr], float(raw[nc + nr])

    def to_config(self):
        return {
            "sample_kernel": self.sample_kernel.to_config(),
            "task_kernel": self.task_kernel.to_config(),
            "p": self.p,
            "optimizer": self.optimizer.to_config(),
            "init_raw": None if self.init_raw is None else list(self.init_raw),
            "variance_batch": self.variance_batch,
        }

    @classmethod
    def from_config(cls, cfg):
        cfg = dict(cfg)
        return cls(
            sample_kernel=KernelSpec.from_config(cfg.get("sample_kernel", KernelSpec().to_config())),
            task_kernel=KernelSpec.from_config(cfg.get("task_kernel", KernelSpec().to_config())),
            p=cfg.get("p", 10),
            optimizer=OptimizerSettings.from_config(cfg.get("optimizer")),
            init_raw=cfg.get("init_raw"),
            variance_batch=cfg.get("variance_batch", 256),
        )


@dataclass(frozen=True)
class PredictiveDistribution:
    """Predictive mean and per-cell variance for ``N*`` samples and ``T`` tasks.

    ``noise_variance`` is a scalar for the multi-task models and a length-T
    vector for the single-task baseline.
    """

    mean: np.ndarray
    variance_diag: np.ndarray
    noise_variance: float | np.ndarray

    def noise_matrix(self):
        return np.broadcast_to(np.asarray(self.noise_variance, dtype=np.float64), self.mean.shape)


# ---------------------------------------------------------------------------
# Shared Kronecker-eigenbasis likelihood
# ---------------------------------------------------------------------------


@dataclass
class KronTerms:
    """Quantities of the diagonalized likelihood shared by LML, gradient and prediction."""

    lml: float
    kinv: np.ndarray  # (N, P) matrix form of diag(K~^-1); vec() of it is the diagonal
    y_tilde: np.ndarray  # (N, P)
    y_rot: np.ndarray  # (N, P) U_R^T Z U_C
    n_floor: int


def kron_likelihood(eig_c, eig_r, z, sigma2, n_null=0, null_energy=0.0, n_total=None):
    """Log marginal likelihood in the joint eigenbasis.

    Parameters
    ----------
    eig_c, eig_r : EigenDecomposition
        Of the task (P x P) and sample (N x N) covariances.
    z : ndarray, (N, P)
        Responses expressed in the task basis.
    sigma2 : float
    n_null : int
        Number of noise-only eigendirections, ``N * (T - P)``.
    null_energy : float
        Squared norm of the responses along those directions.
    n_total : int, optional
        ``N * T``; defaults to ``z.size + n_null``.
    """
    s_c, u_c = eig_c.values, eig_c.vectors
    s_r, u_r = eig_r.values, eig_r.vectors
    y_rot = u_r.T @ z @ u_c
    kinv_vec, n_floor = kron_shift_inverse_diag(s_c, s_r, sigma2, clamp=True, return_floor_count=True)
    kinv = unvec(kinv_vec, s_r.size, s_c.size)
    y_tilde = kinv * y_rot
    if n_total is None:
        n_total = z.size + n_null
    logdet = -float(np.sum(np.log(kinv)))
    quad = float(np.vdot(y_rot, y_tilde))
    if n_null:
        logdet += n_null * math.log(sigma2)
        quad += null_energy / sigma2
    lml = -0.5 * n_total * LOG_2PI - 0.5 * logdet - 0.5 * quad
    return KronTerms(lml=lml, kinv=kinv, y_tilde=y_tilde, y_rot=y_rot, n_floor=n_floor)


def kron_gradient(terms, eig_c, eig_r, dc_list, dr_list, sigma2, n_null=0, null_energy=0.0):
    """Gradient of the log marginal likelihood w.r.t. task, sample and log-noise parameters.

    For a task-kernel parameter the derivative is

        -1/2 diag(K~^-1)^T [diag(U_C^T dC U_C) kron s_r]
        +1/2 vec(Y~)^T vec(S_R Y~ U_C^T dC U_C)

    and symmetrically for the sample kernel. Both pieces are contractions of
    ``U_C^T dC U_C`` against a fixed ``P x P`` matrix, so they are folded into
    ``Q_C = U_C (M_C - diag(w_C)) U_C^T / 2`` once and each parameter costs a
    single elementwise product with ``dC``.
    """
    s_c, u_c = eig_c.values, eig_c.vectors
    s_r, u_r = eig_r.values, eig_r.vectors
    kinv, yt = terms.kinv, terms.y_tilde

    w_c = s_r @ kinv  # (P,)  sum_n kinv[n,p] s_r[n]
    m_c = (yt * s_r[:, None]).T @ yt  # Y~^T S_R Y~
    q_c = 0.5 * u_c @ (m_c - np.diag(w_c)) @ u_c.T
    g_c = [float(np.vdot(q_c, dc)) for dc in dc_list]

    w_r = kinv @ s_c  # (N,)
    m_r = (yt * s_c[None, :]) @ yt.T  # Y~ S_C Y~^T
    q_r = 0.5 * u_r @ (m_r - np.diag(w_r)) @ u_r.T
    g_r = [float(np.vdot(q_r, dr)) for dr in dr_list]

    bracket = float(kinv.sum()) - float(np.vdot(yt, yt))
    if n_null:
        bracket += n_null / sigma2 - null_energy / sigma2**2
    g_s = -0.5 * sigma2 * bracket
    return np.array(g_c + g_r + [g_s])


# ---------------------------------------------------------------------------
# S-MTGPR objective
# ---------------------------------------------------------------------------


class SmtgprObjective:
    """Log marginal likelihood and gradient for fixed data, basis and config.

    Parameter-independent quantities (``Z = Y B``, the out-of-span energy and
    the kernel input caches) are computed once here.
    """

    def __init__(self, config, basis, x, y, task_features=None):
        x = as_matrix(x, "x")
        y = as_matrix(y, "y")
        if x.shape[0] != y.shape[0]:
            raise ModelError(f"x has {x.shape[0]} rows but y has {y.shape[0]}")
        if y.shape[1] != basis.n_tasks:
            raise ModelError(f"y has {y.shape[1]} columns, basis expects {basis.n_tasks}")
        self.config = config
        self.basis = basis
        self.x = x
        self.n, self.t = y.shape
        self.p = basis.p
        self.z = project(basis, y)
        self.null_energy = orthogonal_complement_energy(basis, y) if self.p < self.t else 0.0
        self.n_null = self.n * (self.t - self.p)
        if task_features is None:
            task_features = one_hot_features(self.p)
        task_features = as_matrix(task_features, "task_features")
        if task_features.shape[0] != self.p:
            raise ModelError(f"task_features needs {self.p} rows, got {task_features.shape[0]}")
        self.task_features = task_features
        self.task_cache = GramCache(task_features)
        self.sample_cache = GramCache(x)

    def _covariances(self, raw, grads):
        raw_c, raw_r, log_s2 = self.config.split(raw)
        if grads:
            c, dc = kernel_and_grads(self.config.task_kernel, raw_c, self.task_cache)
            r, dr = kernel_and_grads(self.config.sample_kernel, raw_r, self.sample_cache)
        else:
            c = eval_kernel(self.config.task_kernel, raw_c, self.task_cache)
            r = eval_kernel(self.config.sample_kernel, raw_r, self.sample_cache)
            dc = dr = None
        sigma2 = math.exp(log_s2)
        if not (np.isfinite(sigma2) and sigma2 > 0):
            raise ModelError(f"noise variance exp({log_s2}) is not a positive finite number")
        return c, r, dc, dr, sigma2

    def terms(self, raw):
        c, r, _, _, sigma2 = self._covariances(raw, grads=False)
        eig_c = sym_eig(c, clamp=True)
        eig_r = sym_eig(r, clamp=True)
        t = kron_likelihood(eig_c, eig_r, self.z, sigma2, self.n_null, self.null_energy, self.n * self.t)
        return t, eig_c, eig_r, sigma2

    def lml(self, raw):
        return self.terms(raw)[0].lml

    def lml_and_grad(self, raw):
        c, r, dc, dr, sigma2 = self._covariances(raw, grads=True)
        eig_c = sym_eig(c, clamp=True)
        eig_r = sym_eig(r, clamp=True)
        t = kron_likelihood(eig_c, eig_r, self.z, sigma2, self.n_null, self.null_energy, self.n * self.t)
        g = kron_gradient(t, eig_c, eig_r, dc, dr, sigma2, self.n_null, self.null_energy)
        return t.lml, g

    def negative(self, raw):
        lml, g = self.lml_and_grad(raw)
        return -lml, -g


def log_marginal_likelihood(config, basis, params, x, y, task_features=None):
    """Log marginal likelihood ``L`` of the S-MTGPR model at raw ``params``."""
    return SmtgprObjective(config, basis, x, y, task_features).lml(params)


def negative_log_marginal_likelihood(config, basis, params, x, y, task_features=None):
    """``-L``, the quantity the optimizer minimizes."""
    return -log_marginal_likelihood(config, basis, params, x, y, task_features)


def lml_gradient(config, basis, params, x, y, task_features=None):
    """Gradient of ``L`` w.r.t. the raw layout ``[task kernel, sample kernel, log sigma2]``."""
    return SmtgprObjective(config, basis, x, y, task_features).lml_and_grad(params)[1]


# ---------------------------------------------------------------------------
# Fit and predict
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainedModel:
    """Optimized S-MTGPR parameters with everything prediction needs cached."""

    config: ModelConfig
    basis: OrthogonalBasis
    theta_c: KernelParams
    theta_r: KernelParams
    theta_sigma2: float
    train_x: np.ndarray
    task_features: np.ndarray
    eig_c: EigenDecomposition
    eig_r: EigenDecomposition
    k_tilde_inv_diag: np.ndarray
    y_tilde: np.ndarray
    final_lml: float
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
        return np.concatenate([self.theta_c.raw, self.theta_r.raw, [self.theta_sigma2]])

    @property
    def parameter_count(self):
        return self.config.parameter_count

    def predict(self, x_star, y_train=None, batch=None):
        return predict(self, x_star, y_train=y_train, batch=batch)


def build_model(config, basis, raw, x, y, task_features=None, **meta):
    """Assemble a :class:`TrainedModel` at fixed raw parameters."""
    obj = SmtgprObjective(config, basis, x, y, task_features)
    return _assemble(obj, np.asarray(raw, dtype=np.float64), **meta)


def _assemble(obj, raw, **meta):
    terms, eig_c, eig_r, _ = obj.terms(raw)
    raw_c, raw_r, log_s2 = obj.config.split(raw)
    warn = list(meta.pop("warnings", ()))
    if terms.n_floor:
        warn.append(f"{terms.n_floor} shifted eigenvalues floored at {KTILDE_FLOOR:g}")
    return TrainedModel(
        config=obj.config,
        basis=obj.basis,
        theta_c=KernelParams(raw_c),
        theta_r=KernelParams(raw_r),
        theta_sigma2=log_s2,
        train_x=obj.x,
        task_features=obj.task_features,
        eig_c=eig_c,
        eig_r=eig_r,
        k_tilde_inv_diag=terms.kinv.reshape(-1, order="F"),
        y_tilde=terms.y_tilde,
        final_lml=terms.lml,
        floor_count=terms.n_floor,
        warnings=tuple(warn),
        **meta,
    )


def fit(config, x, y, basis=None, task_features=None):
    """Fit S-MTGPR by maximizing the log marginal likelihood.

    The basis is PCA of the column-centered ``y`` with ``config.p``
    components unless one is passed in.
    """
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if y.shape[0] < 2:
        raise ModelError("need at least 2 training samples")
    if basis is None:
        basis = fit_basis(y, config.p)
    elif basis.p != config.p:
        config = replace(config, p=basis.p)
    obj = SmtgprObjective(config, basis, x, y, task_features)
    x0 = config.initial_raw()
    initial = obj.lml(x0)
    res = minimize(obj.negative, x0, config.optimizer)
    warn = []
    if not res.converged:
        warn.append(f"optimizer did not converge: {res.message}")
    model = _assemble(
        obj,
        res.x,
        initial_lml=initial,
        n_iter=res.n_iter,
        n_eval=res.n_eval,
        converged=res.converged,
        warnings=warn,
    )
    log.info("S-MTGPR P=%d: L %.6g -> %.6g in %d iterations", basis.p, initial, model.final_lml, res.n_iter)
    return model


def sample_kernels(spec, theta_r, train_x, x_star):
    """Cross-covariance ``R*`` (no diagonal term) and ``diag(R**)`` (with it)."""
    x_star = as_matrix(x_star, "x_star")
    if x_star.shape[1] != train_x.shape[1]:
        raise ModelError(f"x_star has {x_star.shape[1]} features, model was trained on {train_x.shape[1]}")
    r_star = eval_kernel(spec, theta_r, x_star, train_x)
    r_ss_diag = kernel_diag(spec, theta_r, x_star)
    if not (np.all(np.isfinite(r_star)) and np.all(np.isfinite(r_ss_diag))):
        raise ModelError("non-finite kernel evaluations at x_star")
    return x_star, r_star, r_ss_diag


def _refresh(model, y_train):
    y_train = as_matrix(y_train, "y_train")
    if y_train.shape != (model.train_x.shape[0], model.basis.n_tasks):
        raise ModelError(f"y_train must have shape {(model.train_x.shape[0], model.basis.n_tasks)}")
    return build_model(model.config, model.basis, model.raw, model.train_x, y_train, model.task_features)


def check_variance(var, scale):
    """Clamp tiny negative round-off to zero; fail on anything beyond it."""
    tol = NEGATIVE_VARIANCE_TOL * max(1.0, float(scale))
    worst = float(np.min(var)) if var.size else 0.0
    if worst < -tol:
        raise ModelError(f"negative predictive variance {worst:.3g} below tolerance -{tol:.3g}")
    np.maximum(var, 0.0, out=var)
    return var


def predict(model, x_star, y_train=None, batch=None):
    """Efficient predictive mean and variance diagonal.

    ``y_train`` is only needed to re-derive the cached transformed residual
    for new training responses at the fitted parameters; by default the
    cached one is used. The variance is accumulated over blocks of ``batch``
    tasks (default ``config.variance_batch``); each block writes a disjoint
    slice of the output.
    """
    if y_train is not None:
        model = _refresh(model, y_train)
    x_star, r_star, r_ss_diag = sample_kernels(model.config.sample_kernel, model.theta_r, model.train_x, x_star)
    n, p = model.train_x.shape[0], model.basis.p
    mean, var = kron_predict(
        r_star,
        r_ss_diag,
        model.eig_c,
        model.eig_r,
        model.k_tilde_inv_diag.reshape((n, p), order="F"),
        model.y_tilde,
        basis=model.basis.b,
        batch=int(batch or model.config.variance_batch),
    )
    return PredictiveDistribution(mean=mean, variance_diag=var, noise_variance=model.sigma2)


def kron_predict(r_star, r_ss_diag, eig_c, eig_r, kinv, y_tilde, basis=None, batch=256):
    """Predictive mean and variance diagonal in the joint eigenbasis.

    ``basis=None`` means the identity (full task covariance). Returns
    ``(mean, variance_diag)``, both ``N* x T``.
    """
    if batch < 1:
        raise ModelError("variance batch size must be >= 1")
    u_c = eig_c.vectors
    c = eig_c.reconstruct()
    a = r_star @ eig_r.vectors  # R* U_R, (N*, N)
    proj = u_c.T @ c if basis is None else u_c.T @ c @ basis.T
    mean = a @ y_tilde @ proj

    h = (a * a) @ kinv  # (N*, P)
    bc = c if basis is None else basis @ c
    g2 = (bc @ u_c) ** 2  # (T, P)
    d_diag = np.diag(c).copy() if basis is None else np.einsum("tp,tp->t", bc, basis)

    t = g2.shape[0]
    var = np.empty((r_star.shape[0], t))
    for start in range(0, t, batch):
        blk = slice(start, min(start + batch, t))
        var[:, blk] = np.outer(r_ss_diag, d_diag[blk]) - h @ g2[blk].T
    prior_scale = float(np.max(np.abs(r_ss_diag)) * np.max(np.abs(d_diag))) if var.size else 1.0
    check_variance(var, prior_scale)
    return mean, var


MAX_DENSE_COV = 4000


def predictive_covariance(model, x_star):
    """Full ``N*T x N*T`` predictive covariance (small problems only)."""
    x_star, r_star, _ = sample_kernels(model.config.sample_kernel, model.theta_r, model.train_x, x_star)
    t = model.basis.n_tasks
    m = x_star.shape[0] * t
    if m > MAX_DENSE_COV:
        raise ModelError(f"full predictive covariance of size {m} exceeds {MAX_DENSE_COV}")
    spec = model.config.sample_kernel
    r_ss = eval_kernel(spec, model.theta_r, x_star)
    b = model.basis.b
    c = model.eig_c.reconstruct()
    d_tilde = b @ c @ b.T
    g = b @ c @ model.eig_c.vectors  # B C U_C
    a = r_star @ model.eig_r.vectors  # R* U_R
    left = np.kron(g, a)
    return np.kron(d_tilde, r_ss) - (left * model.k_tilde_inv_diag) @ left.T
