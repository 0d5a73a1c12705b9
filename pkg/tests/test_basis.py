import numpy as np
import pytest

from smtgpr.basis import BasisError, OrthogonalBasis, fit_basis, orthogonal_complement_energy, project


def test_rank_one_explains_everything(rng):
    y = np.outer(rng.standard_normal(12), rng.standard_normal(7))
    basis = fit_basis(y, 1)
    assert basis.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("shape", [(20, 8), (5, 9), (7, 7)])
def test_full_rank_basis_is_orthonormal(rng, shape):
    y = rng.standard_normal(shape)
    basis = fit_basis(y, min(shape))
    assert np.allclose(basis.b.T @ basis.b, np.eye(min(shape)), atol=1e-8)


def test_explained_variance_sorted_and_nonnegative(rng):
    basis = fit_basis(rng.standard_normal((30, 10)), 6)
    ev = basis.explained_variance
    assert np.all(ev >= 0)
    assert np.all(np.diff(ev) <= 0)


def test_subspace_matches_dense_eigenvectors(rng):
    y = rng.standard_normal((20, 8))
    basis = fit_basis(y, 3)
    yc = y - y.mean(axis=0)
    _, vecs = np.linalg.eigh(yc.T @ yc)
    top = vecs[:, ::-1][:, :3]
    # equal projectors means equal spans
    assert np.allclose(basis.b @ basis.b.T, top @ top.T, atol=1e-8)


def test_sign_convention_is_deterministic(rng):
    y = rng.standard_normal((15, 6))
    a = fit_basis(y, 4)
    b = fit_basis(y.copy(), 4)
    assert np.array_equal(a.b, b.b)
    idx = np.argmax(np.abs(a.b), axis=0)
    assert np.all(a.b[idx, np.arange(4)] > 0)


def test_project_identity_basis_returns_y(rng):
    y = rng.standard_normal((6, 5))
    assert np.array_equal(project(OrthogonalBasis.identity(5), y), y)


def test_project_zero(rng):
    basis = fit_basis(rng.standard_normal((10, 6)), 3)
    assert np.all(project(basis, np.zeros((4, 6))) == 0.0)


def test_reconstruction_at_full_rank(rng):
    y = rng.standard_normal((4, 3)) @ rng.standard_normal((3, 9))
    # centering keeps the rank at most 3
    basis = fit_basis(y, 4)
    assert np.allclose(project(basis, y) @ basis.b.T, y, atol=1e-8)
    assert orthogonal_complement_energy(basis, y) < 1e-16 * np.sum(y * y) + 1e-20


def test_no_centering_in_project(rng):
    y = rng.standard_normal((8, 5)) + 10.0
    basis = fit_basis(y, 2)
    assert np.allclose(project(basis, y), y @ basis.b)


@pytest.mark.parametrize("p", [0, 6, -1])
def test_p_out_of_range(rng, p):
    with pytest.raises(BasisError):
        fit_basis(rng.standard_normal((5, 8)), p)


def test_zero_variance_rejected():
    with pytest.raises(BasisError):
        fit_basis(np.tile(np.arange(4.0), (6, 1)), 1)


def test_non_finite_rejected(rng):
    y = rng.standard_normal((5, 4))
    y[2, 1] = np.nan
    with pytest.raises(ValueError):
        fit_basis(y, 2)


def test_project_dimension_mismatch(rng):
    basis = fit_basis(rng.standard_normal((5, 4)), 2)
    with pytest.raises(BasisError):
        project(basis, np.zeros((3, 5)))
