"""Scalable multi-task Gaussian process regression.

The covariance of ``vec(Y)`` is ``B C B^T kron R + sigma2 I`` with ``B`` a
PCA basis of the training responses, ``C`` a small task covariance and ``R``
a sample covariance. Baselines (per-task GPs and the full Kronecker GP) and
normative-modeling scores live alongside.
"""

__version__ = "0.1.0"

from .basis import OrthogonalBasis, fit_basis
from .baselines import (
    MtKronprodModel,
    StgprModel,
    mtkronprod_fit,
    mtkronprod_predict,
    stgpr_fit,
    stgpr_predict,
)
from .kernels import KernelParams, KernelSpec
from .model import (
    ModelConfig,
    PredictiveDistribution,
    TrainedModel,
    fit,
    lml_gradient,
    log_marginal_likelihood,
    negative_log_marginal_likelihood,
    predict,
)
from .normative import (
    GevdFit,
    NpmMatrix,
    abnormality_probability,
    abnormality_score,
    auc,
    compute_npm,
    fit_gevd,
    r_squared,
)
from .optimize import OptimizerSettings

__all__ = [
    "GevdFit",
    "KernelParams",
    "KernelSpec",
    "ModelConfig",
    "MtKronprodModel",
    "NpmMatrix",
    "OptimizerSettings",
    "OrthogonalBasis",
    "PredictiveDistribution",
    "StgprModel",
    "TrainedModel",
    "abnormality_probability",
    "abnormality_score",
    "auc",
    "compute_npm",
    "fit",
    "fit_basis",
    "fit_gevd",
    "lml_gradient",
    "log_marginal_likelihood",
    "mtkronprod_fit",
    "mtkronprod_predict",
    "negative_log_marginal_likelihood",
    "predict",
    "r_squared",
    "stgpr_fit",
    "stgpr_predict",
]
