import numpy as np
import pytest

from smtgpr.kronecker import (
    KroneckerError,
    as_matrix,
    kron_logdet_shifted,
    kron_matvec,
    kron_product,
    kron_shift_inverse_diag,
    sym_eig,
    unvec,
    vec,
)


def spd(rng, n):
    a = rng.standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


class TestKronProduct:
    def test_scalar(self):
        assert kron_product([[2.0]], [[3.0]]).tolist() == [[6.0]]

    def test_identity_gives_block_diagonal(self, rng):
        m = rng.standard_normal((2, 3))
        k = kron_product(np.eye(2), m)
        np.testing.assert_array_equal(k[:2, :3], m)
        np.testing.assert_array_equal(k[2:, 3:], m)
        np.testing.assert_array_equal(k[:2, 3:], 0.0)

    def test_block_structure(self, rng):
        a, b = rng.standard_normal((3, 2)), rng.standard_normal((2, 4))
        k = kron_product(a, b)
        assert k.shape == (6, 8)
        for i in range(3):
            for j in range(2):
                np.testing.assert_allclose(k[2 * i : 2 * i + 2, 4 * j : 4 * j + 4], a[i, j] * b)

    def test_size_guard(self, monkeypatch):
        import smtgpr.kronecker as kr

        monkeypatch.setattr(kr, "MAX_KRON_ENTRIES", 10)
        with pytest.raises(KroneckerError):
            kron_product(np.ones((2, 2)), np.ones((2, 2)))

    def test_rejects_non_finite(self):
        with pytest.raises(KroneckerError):
            as_matrix([[np.nan]])


class TestVec:
    def test_column_major(self):
        assert vec([[1, 2], [3, 4]]).tolist() == [1, 3, 2, 4]

    def test_column_vector(self):
        np.testing.assert_array_equal(vec([[1.0], [2.0], [3.0]]), [1.0, 2.0, 3.0])

    def test_round_trip(self, rng):
        a = rng.standard_normal((3, 4))
        np.testing.assert_array_equal(unvec(vec(a), 3, 4), a)

    def test_unvec_bad_length(self):
        with pytest.raises(KroneckerError):
            unvec(np.ones(5), 2, 3)


class TestSymEig:
    def test_diagonal(self):
        e = sym_eig(np.diag([2.0, 5.0]))
        np.testing.assert_allclose(e.values, [5.0, 2.0])
        np.testing.assert_allclose(np.abs(e.vectors), [[0.0, 1.0], [1.0, 0.0]])

    def test_identity(self):
        np.testing.assert_allclose(sym_eig(np.eye(3)).values, [1.0, 1.0, 1.0])

    def test_reconstruction(self, rng):
        a = rng.standard_normal((6, 6))
        a = a + a.T
        e = sym_eig(a)
        err = np.linalg.norm(e.reconstruct() - a) / np.linalg.norm(a)
        assert err < 1e-10
        np.testing.assert_allclose(e.vectors.T @ e.vectors, np.eye(6), atol=1e-12)
        assert np.all(np.diff(e.values) <= 0)

    def test_non_square(self):
        with pytest.raises(KroneckerError):
            sym_eig(np.ones((2, 3)))

    def test_non_symmetric(self):
        with pytest.raises(KroneckerError):
            sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_tiny_asymmetry_is_symmetrized(self):
        a = np.array([[2.0, 1.0], [1.0 + 1e-13, 2.0]])
        np.testing.assert_allclose(sym_eig(a).values, [3.0, 1.0])

    def test_clamp_low_rank(self, rng):
        v = rng.standard_normal((5, 2))
        e = sym_eig(v @ v.T, clamp=True)
        assert e.rank == 2
        assert np.all(e.values >= 0)
        np.testing.assert_array_equal(e.values[2:], 0.0)


class TestShiftInverseDiag:
    def test_trivial(self):
        np.testing.assert_allclose(kron_shift_inverse_diag([1.0], [1.0], 1.0), [0.5])
        np.testing.assert_allclose(kron_shift_inverse_diag([2.0, 0.0], [3.0], 1.0), [1 / 7, 1.0])

    def test_dense_inverse(self, rng):
        s_c, s_r = rng.uniform(0, 3, 4), rng.uniform(0, 3, 5)
        dense = np.linalg.inv(np.diag(np.kron(s_c, s_r)) + 0.7 * np.eye(20))
        np.testing.assert_allclose(kron_shift_inverse_diag(s_c, s_r, 0.7), np.diag(dense), rtol=1e-12)

    def test_singular_raises(self):
        with pytest.raises(KroneckerError):
            kron_shift_inverse_diag([1.0, 0.0], [1.0], 0.0)

    def test_clamp_counts(self):
        out, n = kron_shift_inverse_diag([1.0, 0.0], [1.0], 0.0, clamp=True, return_floor_count=True)
        assert n == 1
        assert out[0] == 1.0 and out[1] == 1e12


class TestUsefulIdentities:
    """Items 2-9 of the Kronecker/trace identity list, checked densely."""

    def test_inverse_of_product(self, rng):
        a, c, b = spd(rng, 3), spd(rng, 3), spd(rng, 3)
        lhs = np.linalg.inv(a @ c @ b)
        rhs = np.linalg.inv(b) @ np.linalg.inv(c) @ np.linalg.inv(a)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-8, atol=1e-12)

    def test_mixed_product(self, rng):
        a, b = rng.standard_normal((3, 2)), rng.standard_normal((2, 2))
        c, d = rng.standard_normal((2, 4)), rng.standard_normal((2, 3))
        np.testing.assert_allclose(kron_product(a, b) @ kron_product(c, d), kron_product(a @ c, b @ d), atol=1e-12)

    @pytest.mark.parametrize("n", [2, 3])
    def test_inverse_of_kron(self, rng, n):
        a, b = spd(rng, n), spd(rng, n)
        np.testing.assert_allclose(
            np.linalg.inv(kron_product(a, b)), kron_product(np.linalg.inv(a), np.linalg.inv(b)), rtol=1e-8, atol=1e-12
        )

    def test_eig_of_shifted_kron(self, rng):
        a, b = spd(rng, 3), spd(rng, 4)
        ea, eb = sym_eig(a), sym_eig(b)
        u = kron_product(ea.vectors, eb.vectors)
        s = np.kron(ea.values, eb.values) + 1.0
        np.testing.assert_allclose((u * s) @ u.T, kron_product(a, b) + np.eye(12), rtol=1e-8, atol=1e-10)

    def test_matvec(self, rng):
        a, b, c = rng.standard_normal((3, 2)), rng.standard_normal((4, 5)), rng.standard_normal((5, 2))
        np.testing.assert_allclose(kron_product(a, b) @ vec(c), vec(b @ c @ a.T), atol=1e-10)
        np.testing.assert_allclose(kron_matvec(a, b, vec(c)), vec(b @ c @ a.T), atol=1e-10)

    def test_logdet_product(self, rng):
        a, c = spd(rng, 4), spd(rng, 4)
        lhs = np.linalg.slogdet(a @ c)[1]
        rhs = np.linalg.slogdet(a)[1] + np.linalg.slogdet(c)[1]
        assert abs(lhs - rhs) < 1e-8 * abs(lhs)

    def test_logdet_shifted_kron(self, rng):
        a, b = spd(rng, 3), spd(rng, 4)
        dense = np.linalg.slogdet(kron_product(a, b) + np.eye(12))[1]
        assert abs(kron_logdet_shifted(a, b) - dense) < 1e-8 * abs(dense)

    def test_logdet_derivative(self, rng):
        # complex-step derivative: Im ln|C(x + ih)| / h, exact to rounding
        a0, a1 = spd(rng, 4), rng.standard_normal((4, 4))
        a1 = a1 + a1.T
        x, h = 0.1, 1e-30
        sign, _ = np.linalg.slogdet((a0 + (x + 1j * h) * a1).astype(complex))
        cs = np.angle(sign) / h
        analytic = np.trace(np.linalg.solve(a0 + x * a1, a1))
        assert abs(cs - analytic) < 1e-8 * max(1.0, abs(analytic))

    def test_trace_cyclic(self, rng):
        a, c = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
        b, d = rng.standard_normal((5, 2)), rng.standard_normal((2, 3))
        t = np.trace(a @ c @ b @ d)
        for perm in (c @ b @ d @ a, b @ d @ a @ c, d @ a @ c @ b):
            assert abs(np.trace(perm) - t) < 1e-8 * max(1.0, abs(t))
