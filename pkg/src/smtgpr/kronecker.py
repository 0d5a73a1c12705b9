"""Kronecker algebra, the column-major vec convention and symmetric eigensolves.

Every efficient formula in the package reshapes between an ``N x T`` matrix
and its length ``N*T`` vectorization. The convention is fixed here once:
``vec`` stacks columns, so element ``(i, j)`` lands at ``j*N + i`` and

    (A kron B) vec(C) == vec(B @ C @ A.T)

holds with ``A`` acting on columns and ``B`` on rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYMMETRY_TOL = 1e-10
RANK_TOL = 1e-12
KTILDE_FLOOR = 1e-12
MAX_KRON_ENTRIES = 2**31


class KroneckerError(ValueError):
    """Raised for invalid Kronecker-algebra inputs."""


def as_matrix(a, name="matrix", allow_nan=False):
    """Return ``a`` as a finite 2-D float64 array with at least one entry.

    ``allow_nan`` permits NaN (masked) cells but still rejects infinities.
    """
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise KroneckerError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise KroneckerError(f"{name} must be non-empty, got shape {arr.shape}")
    bad = np.isinf(arr) if allow_nan else ~np.isfinite(arr)
    if np.any(bad):
        raise KroneckerError(f"{name} contains non-finite entries")
    return arr


def kron_product(a, b):
    """Dense Kronecker product with an explicit size guard."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    rows = a.shape[0] * b.shape[0]
    cols = a.shape[1] * b.shape[1]
    if rows * cols > MAX_KRON_ENTRIES:
        raise KroneckerError(f"Kronecker product of size {rows}x{cols} is too large to materialize")
    return np.kron(a, b)


def vec(a):
    """Stack the columns of ``a`` into a 1-D vector (column-major)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        return a.copy()
    return a.reshape(-1, order="F")


def unvec(v, rows, cols):
    """Inverse of :func:`vec`."""
    v = np.asarray(v, dtype=np.float64)
    if v.size != rows * cols:
        raise KroneckerError(f"cannot reshape length {v.size} into {rows}x{cols}")
    return v.reshape((rows, cols), order="F")


@dataclass(frozen=True)
class EigenDecomposition:
    """Symmetric eigendecomposition ``A = U diag(S) U^T`` with ``S`` descending."""

    vectors: np.ndarray
    values: np.ndarray

    def reconstruct(self):
        return (self.vectors * self.values) @ self.vectors.T

    @property
    def rank(self):
        top = self.values[0] if self.values.size else 0.0
        if top <= 0:
            return 0
        return int(np.sum(self.values > RANK_TOL * top))


def symmetrize(a):
    return 0.5 * (a + a.T)


def sym_eig(a, clamp=False):
    """Eigendecomposition of a symmetric matrix.

    The input is symmetrized before decomposing. With ``clamp=True``
    eigenvalues below ``1e-12 * max(S)`` (including small negatives from
    round-off) are set to zero, which is what covariance matrices want.

    Raises
    ------
    KroneckerError
        If ``a`` is not square or deviates from symmetry by more than
        ``1e-10`` relative to its largest entry.
    """
    a = as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise KroneckerError(f"sym_eig needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        raise KroneckerError("sym_eig input is not symmetric within tolerance")
    s, u = np.linalg.eigh(symmetrize(a))
    s = s[::-1].copy()
    u = u[:, ::-1].copy()
    if clamp:
        top = max(s[0], 0.0)
        s[s < RANK_TOL * top] = 0.0
    return EigenDecomposition(vectors=u, values=s)


def kron_eigvals(s_c, s_r):
    """Eigenvalues of ``C kron R`` laid out as an ``len(s_r) x len(s_c)`` matrix.

    Entry ``(n, p)`` is ``s_c[p] * s_r[n]``, i.e. ``vec`` of this matrix is
    ``kron(s_c, s_r)``.
    """
    return np.outer(np.asarray(s_r, dtype=np.float64), np.asarray(s_c, dtype=np.float64))


def kron_shift_inverse_diag(s_c, s_r, sigma2, floor=KTILDE_FLOOR, clamp=False, return_floor_count=False):
    """Diagonal of ``(diag(s_c) kron diag(s_r) + sigma2 I)^-1`` as a vector.

    A denominator at or below ``floor`` means the shifted matrix is
    numerically singular. By default that raises; with ``clamp=True`` such
    denominators are raised to ``floor`` and counted instead (pass
    ``return_floor_count=True`` to get the count).
    """
    s_c = np.atleast_1d(np.asarray(s_c, dtype=np.float64))
    s_r = np.atleast_1d(np.asarray(s_r, dtype=np.float64))
    with np.errstate(over="ignore", invalid="ignore"):
        denom = np.kron(s_c, s_r) + float(sigma2)
    if not np.all(np.isfinite(denom)):
        raise KroneckerError("non-finite Kronecker eigenvalues")
    low = denom <= floor
    n_floor = int(low.sum())
    if n_floor:
        if not clamp:
            raise KroneckerError(f"{n_floor} shifted Kronecker eigenvalues at or below {floor:g}")
        denom = np.where(low, floor, denom)
    out = 1.0 / denom
    if return_floor_count:
        return out, n_floor
    return out


def kron_matvec(a, b, v):
    """``(A kron B) v`` without forming the Kronecker product."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = unvec(v, b.shape[1], a.shape[1])
    return vec(b @ c @ a.T)


def kron_logdet_shifted(a, b, shift=1.0):
    """``ln|A kron B + shift I|`` for symmetric PSD ``A``, ``B`` via eigenvalues."""
    sa = np.linalg.eigvalsh(symmetrize(np.asarray(a, dtype=np.float64)))
    sb = np.linalg.eigvalsh(symmetrize(np.asarray(b, dtype=np.float64)))
    return float(np.sum(np.log(np.kron(sa, sb) + shift)))
