"""Covariance functions: linear, squared exponential and diagonal isotropic.

A kernel is an ordered sum of terms. Every positive quantity is stored as its
logarithm, so the raw parameter vector is unconstrained and gradients are
taken with respect to the log values (``dK/draw = q * dK/dq``).

Raw parameter layout per term, in ``KernelSpec.terms`` order:

=====================  ==========================================
``linear``             ``[log a]``            -> ``a * X1 X2^T``
``squared_exponential`` ``[log s, log l]``    -> ``s * exp(-|x-x'|^2 / (2 l^2))``
``diagonal_isotropic`` ``[log d]``            -> ``d * I`` (same point set only)
=====================  ==========================================
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LINEAR = "linear"
SQUARED_EXPONENTIAL = "squared_exponential"
DIAGONAL_ISOTROPIC = "diagonal_isotropic"

TERM_PARAMS = {
    LINEAR: ("amplitude",),
    SQUARED_EXPONENTIAL: ("amplitude", "lengthscale"),
    DIAGONAL_ISOTROPIC: ("amplitude",),
}

_ALIASES = {
    "linear": LINEAR,
    "lin": LINEAR,
    "squared_exponential": SQUARED_EXPONENTIAL,
    "squaredexponential": SQUARED_EXPONENTIAL,
    "se": SQUARED_EXPONENTIAL,
    "rbf": SQUARED_EXPONENTIAL,
    "diagonal_isotropic": DIAGONAL_ISOTROPIC,
    "diagonalisotropic": DIAGONAL_ISOTROPIC,
    "diag": DIAGONAL_ISOTROPIC,
    "white": DIAGONAL_ISOTROPIC,
}


class KernelError(ValueError):
    pass


def _canonical(name):
    key = str(name).strip().lower().replace("-", "_")
    if key not in _ALIASES:
        raise KernelError(f"unknown kernel term {name!r}; known: {sorted(TERM_PARAMS)}")
    return _ALIASES[key]


@dataclass(frozen=True)
class KernelSpec:
    """Ordered list of kernel terms; the order fixes the raw-parameter layout."""

    terms: tuple = (LINEAR, SQUARED_EXPONENTIAL, DIAGONAL_ISOTROPIC)

    def __post_init__(self):
        if isinstance(self.terms, str):
            raise KernelError("terms must be a sequence of term names")
        terms = tuple(_canonical(t) for t in self.terms)
        if not terms:
            raise KernelError("a kernel needs at least one term")
        object.__setattr__(self, "terms", terms)

    @property
    def n_params(self):
        return sum(len(TERM_PARAMS[t]) for t in self.terms)

    @property
    def param_names(self):
        return [f"{i}:{t}.{p}" for i, t in enumerate(self.terms) for p in TERM_PARAMS[t]]

    def offsets(self):
        out, pos = [], 0
        for t in self.terms:
            out.append(pos)
            pos += len(TERM_PARAMS[t])
        return out

    def default_raw(self):
        return np.zeros(self.n_params)

    def to_config(self):
        return {"terms": list(self.terms)}

    @classmethod
    def from_config(cls, cfg):
        if isinstance(cfg, KernelSpec):
            return cfg
        if isinstance(cfg, dict):
            return cls(tuple(cfg["terms"]))
        return cls(tuple(cfg))


@dataclass(frozen=True)
class KernelParams:
    """Raw (log-space) parameters for a :class:`KernelSpec`."""

    raw: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        raw = np.atleast_1d(np.asarray(self.raw, dtype=np.float64)).copy()
        if raw.ndim != 1 or not np.all(np.isfinite(raw)):
            raise KernelError("raw kernel parameters must be a finite 1-D vector")
        raw.setflags(write=False)
        object.__setattr__(self, "raw", raw)

    def values(self):
        with np.errstate(over="ignore", under="ignore"):
            v = np.exp(self.raw)
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise KernelError(f"kernel parameter overflow/underflow for raw values {self.raw}")
        return v


def _check_params(spec, params):
    raw = params.raw if isinstance(params, KernelParams) else np.asarray(params, dtype=np.float64)
    if raw.shape != (spec.n_params,):
        raise KernelError(f"kernel {spec.terms} needs {spec.n_params} raw parameters, got {raw.shape}")
    return KernelParams(raw).values()


def pairwise_sqdist(x1, x2):
    """Squared Euclidean distances via the Gram expansion, clamped at zero."""
    n1 = np.einsum("ij,ij->i", x1, x1)
    n2 = np.einsum("ij,ij->i", x2, x2)
    d = n1[:, None] + n2[None, :] - 2.0 * (x1 @ x2.T)
    np.maximum(d, 0.0, out=d)
    return d


class GramCache:
    """Parameter-independent pieces of a kernel on fixed inputs.

    Holds the inner-product matrix and squared distances between ``x1`` and
    ``x2`` (``x2=None`` means the same point set, which also enables the
    diagonal-isotropic term). Optimizers evaluate the kernel hundreds of
    times on the same inputs; this avoids recomputing the O(n^2 F) parts.
    """

    def __init__(self, x1, x2=None):
        x1 = _as_inputs(x1)
        self.same = x2 is None or x2 is x1
        x2 = x1 if self.same else _as_inputs(x2)
        if x1.shape[1] != x2.shape[1]:
            raise KernelError(f"feature dimension mismatch: {x1.shape[1]} vs {x2.shape[1]}")
        self.x1, self.x2 = x1, x2
        self.gram = x1 @ x2.T
        if self.same:
            self.gram = 0.5 * (self.gram + self.gram.T)
        self.sqdist = pairwise_sqdist(x1, x2)
        if self.same:
            self.sqdist = 0.5 * (self.sqdist + self.sqdist.T)
            np.fill_diagonal(self.sqdist, 0.0)

    @property
    def shape(self):
        return self.gram.shape


def _as_inputs(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise KernelError(f"kernel inputs must be a non-empty 2-D array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise KernelError("kernel inputs contain non-finite values")
    return x


def _cache(x1, x2=None):
    if isinstance(x1, GramCache):
        return x1
    return GramCache(x1, x2)


def kernel_terms(spec, params, x1, x2=None):
    """Return the list of per-term matrices (already scaled)."""
    vals = _check_params(spec, params)
    gc = _cache(x1, x2)
    out = []
    for term, off in zip(spec.terms, spec.offsets()):
        if term == LINEAR:
            out.append(vals[off] * gc.gram)
        elif term == SQUARED_EXPONENTIAL:
            s, ell = vals[off], vals[off + 1]
            out.append(s * np.exp(gc.sqdist * (-0.5 / (ell * ell))))
        else:
            if gc.same:
                out.append(vals[off] * np.eye(gc.shape[0]))
            else:
                out.append(np.zeros(gc.shape))
    return out


def eval_kernel(spec, params, x1, x2=None):
    """Evaluate the summed kernel matrix.

    ``x1`` may be a :class:`GramCache`. Passing ``x2=None`` (or the same
    object as ``x1``) evaluates the kernel on one point set, which adds the
    diagonal-isotropic term; a distinct ``x2`` gives the cross-covariance
    without it.
    """
    terms = kernel_terms(spec, params, x1, x2)
    k = terms[0].copy()
    for t in terms[1:]:
        k += t
    return k


def kernel_diag(spec, params, x):
    """Diagonal of ``eval_kernel(spec, params, x)`` in O(n F)."""
    vals = _check_params(spec, params)
    x = _as_inputs(x)
    d = np.zeros(x.shape[0])
    for term, off in zip(spec.terms, spec.offsets()):
        if term == LINEAR:
            d += vals[off] * np.einsum("ij,ij->i", x, x)
        else:
            d += vals[off]
    return d


def kernel_and_grads(spec, params, x1):
    """Kernel matrix on one point set and its gradients w.r.t. every raw parameter."""
    vals = _check_params(spec, params)
    gc = _cache(x1)
    if not gc.same:
        raise KernelError("gradients are defined for a kernel on a single point set")
    n = gc.shape[0]
    k = np.zeros((n, n))
    grads = []
    for term, off in zip(spec.terms, spec.offsets()):
        if term == LINEAR:
            t = vals[off] * gc.gram
            grads.append(t)
        elif term == SQUARED_EXPONENTIAL:
            s, ell = vals[off], vals[off + 1]
            t = s * np.exp(gc.sqdist * (-0.5 / (ell * ell)))
            grads.append(t)
            grads.append(t * gc.sqdist / (ell * ell))
        else:
            t = vals[off] * np.eye(n)
            grads.append(t)
        k += t
    return k, grads


def kernel_grad(spec, params, x1, param_index):
    """Gradient of ``K(x1, x1)`` with respect to one raw (log) parameter."""
    if not 0 <= int(param_index) < spec.n_params:
        raise KernelError(f"param_index {param_index} out of range for {spec.n_params} parameters")
    return kernel_and_grads(spec, params, x1)[1][int(param_index)]


def one_hot_features(n):
    """Task features used when none are supplied: the rows of ``I_n``."""
    return np.eye(int(n))
