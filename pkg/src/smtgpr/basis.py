"""Orthonormal task basis from PCA of the training responses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kronecker import as_matrix


class BasisError(ValueError):
    pass


@dataclass(frozen=True)
class OrthogonalBasis:
    """A ``T x P`` column-orthonormal basis ``B`` with PCA metadata.

    Attributes
    ----------
    b : ndarray, (T, P)
    explained_variance : ndarray, (P,)
        Variance of the centered training data along each column, descending.
    column_means : ndarray, (T,)
        Means removed before the decomposition. ``project`` does not use them.
    total_variance : float
        Total variance of the centered training data (sum over all T columns).
    """

    b: np.ndarray
    explained_variance: np.ndarray
    column_means: np.ndarray
    total_variance: float

    @property
    def n_tasks(self):
        return self.b.shape[0]

    @property
    def p(self):
        return self.b.shape[1]

    @property
    def explained_variance_ratio(self):
        if self.total_variance <= 0:
            return np.zeros_like(self.explained_variance)
        return self.explained_variance / self.total_variance

    @classmethod
    def identity(cls, n_tasks):
        """``B = I``: every task is its own latent component."""
        t = int(n_tasks)
        return cls(np.eye(t), np.ones(t), np.zeros(t), float(t))


def _fix_signs(v):
    # make the largest-magnitude entry of each column positive
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[idx, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return v * signs


def fit_basis(y, p):
    """Leading ``p`` principal directions of the column-centered responses.

    Parameters
    ----------
    y : array_like, (N, T)
    p : int
        Number of components, ``1 <= p <= min(N, T)``.
    """
    y = as_matrix(y, "y")
    n, t = y.shape
    p = int(p)
    if not 1 <= p <= min(n, t):
        raise BasisError(f"p={p} must lie in [1, min(N, T)={min(n, t)}]")
    means = y.mean(axis=0)
    yc = y - means
    total = float(np.sum(yc * yc))
    if total <= 0.0 or np.max(np.abs(yc)) == 0.0:
        raise BasisError("responses have zero variance (all rows identical)")
    # vt has min(N, T) rows, so p always fits
    _, s, vt = np.linalg.svd(yc, full_matrices=False)
    v = np.ascontiguousarray(_fix_signs(vt[:p].T))
    sv = s[:p]
    denom = max(n - 1, 1)
    return OrthogonalBasis(
        b=v,
        explained_variance=sv**2 / denom,
        column_means=means,
        total_variance=total / denom,
    )


def project(basis, y):
    """Latent responses ``Z = Y B`` (no centering)."""
    y = as_matrix(y, "y")
    if y.shape[1] != basis.n_tasks:
        raise BasisError(f"y has {y.shape[1]} columns, basis expects {basis.n_tasks}")
    return y @ basis.b


def orthogonal_complement_energy(basis, y):
    """``||Y (I - B B^T)||_F^2``: the part of ``Y`` outside the basis span."""
    y = as_matrix(y, "y")
    resid = y - (y @ basis.b) @ basis.b.T
    return float(np.sum(resid * resid))
