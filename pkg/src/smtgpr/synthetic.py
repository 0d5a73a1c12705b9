"""Synthetic normative-modeling data with spatially correlated tasks.

Responses are exact draws from a Kronecker GP,

    vec(Y) ~ N(0, D kron R + noise I),

where ``D`` is a squared-exponential correlation over a 1-D grid of ``T``
voxels on ``[0, 1]`` and ``R`` is a linear + squared-exponential kernel on
standard normal covariates with ``R_ii = 1`` in expectation. The SE
lengthscale is ``sample_lengthscale * sqrt(F)``. Training
and test samples share one draw, so the test responses are predictable
from the training ones. Abnormal test samples receive a constant shift of
``shift`` marginal standard deviations on a random contiguous patch of
voxels, with a random sign per sample.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg

from .kernels import pairwise_sqdist


class SyntheticError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_train: int = 150
    n_test_normal: int = 100
    n_test_abnormal: int = 100
    n_tasks: int = 400
    n_features: int = 20
    spatial_lengthscale: float = 0.05
    shift: float = 1.5
    patch_fraction: float = 0.1
    noise_variance: float = 0.25
    linear_weight: float = 0.2
    sample_lengthscale: float = 1.0

    def __post_init__(self):
        for name in ("n_train", "n_tasks", "n_features"):
            if int(getattr(self, name)) < 1:
                raise SyntheticError(f"{name} must be >= 1")
            object.__setattr__(self, name, int(getattr(self, name)))
        for name in ("n_test_normal", "n_test_abnormal"):
            if int(getattr(self, name)) < 0:
                raise SyntheticError(f"{name} must be >= 0")
            object.__setattr__(self, name, int(getattr(self, name)))
        if not self.spatial_lengthscale > 0:
            raise SyntheticError("spatial_lengthscale must be > 0")
        if not self.shift >= 0:
            raise SyntheticError("shift must be >= 0")
        if not 0 < self.patch_fraction <= 1:
            raise SyntheticError("patch_fraction must lie in (0, 1]")
        if not self.noise_variance >= 0:
            raise SyntheticError("noise_variance must be >= 0")
        if not self.sample_lengthscale > 0:
            raise SyntheticError("sample_lengthscale must be > 0")
        if not 0 <= self.linear_weight <= 1:
            raise SyntheticError("linear_weight must lie in [0, 1]")

    @property
    def n_total(self):
        return self.n_train + self.n_test_normal + self.n_test_abnormal

    @property
    def patch_size(self):
        return max(1, int(round(self.patch_fraction * self.n_tasks)))

    def to_config(self):
        return asdict(self)

    @classmethod
    def from_config(cls, cfg):
        if isinstance(cfg, SyntheticSpec):
            return cfg
        cfg = dict(cfg or {})
        unknown = set(cfg) - set(cls.__dataclass_fields__)
        if unknown:
            raise SyntheticError(f"unknown synthetic keys: {sorted(unknown)}")
        return cls(**cfg)


@dataclass(frozen=True)
class SyntheticData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    labels: np.ndarray  # 0 normal, 1 abnormal

    def __iter__(self):
        return iter((self.x_train, self.y_train, self.x_test, self.y_test, self.labels))


def spatial_covariance(n_tasks, lengthscale):
    """SE correlation over ``n_tasks`` evenly spaced points in ``[0, 1]``."""
    grid = np.linspace(0.0, 1.0, n_tasks)
    d = grid[:, None] - grid[None, :]
    return np.exp(-0.5 * (d / lengthscale) ** 2)


def sample_covariance(x, linear_weight, lengthscale=1.0):
    """Linear + SE kernel with ``E[R_ii] = 1`` for standard normal ``x``."""
    f = x.shape[1]
    lin = (x @ x.T) / f
    se = np.exp(-pairwise_sqdist(x, x) / (2.0 * f * lengthscale**2))
    np.fill_diagonal(se, 1.0)
    return linear_weight * lin + (1.0 - linear_weight) * se


def _psd_sqrt(a):
    # eigen square root; clamps the round-off negatives of near-singular SE matrices
    s, u = linalg.eigh(a)
    return u * np.sqrt(np.clip(s, 0.0, None))


def _chol_factor(a):
    jitter = 0.0
    scale = float(np.mean(np.diag(a)))
    for _ in range(8):
        try:
            return linalg.cholesky(a + jitter * np.eye(a.shape[0]), lower=True)
        except linalg.LinAlgError:
            jitter = max(jitter * 10.0, 1e-10 * scale)
    return _psd_sqrt(a)


def generate_synthetic(spec=None, seed=0):
    """Draw ``(x_train, y_train, x_test, y_test, labels)``; deterministic given ``seed``."""
    spec = SyntheticSpec.from_config(spec or {})
    rng = np.random.default_rng(seed)
    n, t = spec.n_total, spec.n_tasks
    x = rng.standard_normal((n, spec.n_features))
    l_r = _chol_factor(sample_covariance(x, spec.linear_weight, spec.sample_lengthscale))
    l_d = _psd_sqrt(spatial_covariance(t, spec.spatial_lengthscale))
    xi = rng.standard_normal((n, l_d.shape[1]))
    y = l_r @ xi @ l_d.T
    y += math.sqrt(spec.noise_variance) * rng.standard_normal((n, t))

    n_tr, n_norm = spec.n_train, spec.n_test_normal
    labels = np.concatenate([np.zeros(n_norm, dtype=np.int64), np.ones(spec.n_test_abnormal, dtype=np.int64)])
    y_test = y[n_tr:].copy()
    if spec.n_test_abnormal:
        marginal_sd = math.sqrt(1.0 + spec.noise_variance)
        size = spec.patch_size
        starts = rng.integers(0, t - size + 1, size=spec.n_test_abnormal)
        signs = rng.choice([-1.0, 1.0], size=spec.n_test_abnormal)
        for k, (s0, sg) in enumerate(zip(starts, signs)):
            y_test[n_norm + k, s0 : s0 + size] += sg * spec.shift * marginal_sd
    return SyntheticData(
        x_train=x[:n_tr],
        y_train=y[:n_tr],
        x_test=x[n_tr:],
        y_test=y_test,
        labels=labels,
    )
