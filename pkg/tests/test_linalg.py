import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcopt.errors import ConvergenceError, InvalidInputError
from bcopt.linalg import (
    SymMatrix,
    add,
    as_vector,
    conjugate,
    frobenius_norm,
    matmul,
    scale,
    sym_eigen,
)


def random_symmetric(rng, dim, scale=1.0):
    a = scale * rng.standard_normal((dim, dim))
    return SymMatrix(0.5 * (a + a.T))


class TestSymMatrix:
    def test_exact_symmetry_after_construction(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((6, 6))
        m = SymMatrix(0.5 * (a + a.T)).mat
        assert np.array_equal(m, m.T)

    def test_rejects_nonsquare(self):
        with pytest.raises(InvalidInputError):
            SymMatrix(np.zeros((2, 3)))

    def test_rejects_asymmetric(self):
        with pytest.raises(InvalidInputError):
            SymMatrix(np.array([[0.0, 1.0], [0.0, 0.0]]))

    def test_rejects_nonfinite(self):
        with pytest.raises(InvalidInputError):
            SymMatrix(np.array([[np.nan, 0.0], [0.0, 1.0]]))


class TestSymEigen:
    def test_identity_dim3(self):
        eig = sym_eigen(SymMatrix.identity(3))
        np.testing.assert_array_equal(eig.eigenvalues, np.ones(3))
        assert np.abs(eig.basis.T @ eig.basis - np.eye(3)).max() < 1e-10

    def test_two_by_two_hand_values(self):
        # characteristic polynomial of [[2,1],[1,2]]: (2-x)^2 - 1 = 0
        eig = sym_eigen(SymMatrix(np.array([[2.0, 1.0], [1.0, 2.0]])))
        np.testing.assert_allclose(eig.eigenvalues, [3.0, 1.0], atol=1e-12)

    def test_reconstruction_dim16(self):
        a = random_symmetric(np.random.default_rng(7), 16)
        eig = sym_eigen(a)
        scale_max = np.abs(a.mat).max()
        assert np.abs(eig.reconstruct() - a.mat).max() < 1e-8 * scale_max

    def test_eigenvalues_sorted_descending(self):
        a = random_symmetric(np.random.default_rng(3), 9)
        eig = sym_eigen(a)
        assert np.all(np.diff(eig.eigenvalues) <= 0)

    def test_positive_definite_input_gives_positive_eigenvalues(self):
        rng = np.random.default_rng(5)
        b = rng.standard_normal((8, 8))
        a = SymMatrix(b.T @ b + 1e-6 * np.eye(8))
        eig = sym_eigen(a)
        assert np.all(eig.eigenvalues > 0)

    def test_zero_matrix(self):
        eig = sym_eigen(SymMatrix(np.zeros((4, 4))))
        np.testing.assert_array_equal(eig.eigenvalues, np.zeros(4))

    def test_convergence_error_carries_off_diagonal_norm(self):
        a = SymMatrix(np.array([[2.0, 1.0], [1.0, 2.0]]))
        with pytest.raises(ConvergenceError) as err:
            sym_eigen(a, max_sweeps=0)
        assert err.value.off_diagonal_norm > 0

    def test_dim128_within_tolerance(self):
        a = random_symmetric(np.random.default_rng(11), 128)
        eig = sym_eigen(a)
        scale_max = np.abs(a.mat).max()
        assert np.abs(eig.reconstruct() - a.mat).max() < 1e-8 * scale_max
        assert np.abs(eig.basis.T @ eig.basis - np.eye(128)).max() < 1e-10

    @settings(max_examples=40, deadline=None)
    @given(dim=st.integers(1, 12), seed=st.integers(0, 10_000))
    def test_reconstruction_and_orthogonality_property(self, dim, seed):
        a = random_symmetric(np.random.default_rng(seed), dim, scale=3.0)
        eig = sym_eigen(a)
        scale_max = max(np.abs(a.mat).max(), 1e-30)
        assert np.abs(eig.reconstruct() - a.mat).max() < 1e-8 * scale_max
        assert np.abs(eig.basis.T @ eig.basis - np.eye(dim)).max() < 1e-10
        assert np.all(np.diff(eig.eigenvalues) <= 0)


class TestConjugate:
    def test_identity_basis_is_identity_map(self):
        a = random_symmetric(np.random.default_rng(0), 5)
        out = conjugate(a, np.eye(5))
        np.testing.assert_array_equal(out.mat, a.mat)

    def test_rotation_by_90_degrees_swaps_diagonal(self):
        a = SymMatrix(np.diag([1.0, 2.0]))
        q = np.array([[0.0, -1.0], [1.0, 0.0]])
        out = conjugate(a, q)
        np.testing.assert_allclose(out.mat, np.diag([2.0, 1.0]), atol=1e-15)

    def test_trace_preserved_under_orthogonal_basis(self):
        rng = np.random.default_rng(9)
        a = random_symmetric(rng, 7)
        q = sym_eigen(random_symmetric(rng, 7)).basis
        out = conjugate(a, q)
        tr_a = np.trace(a.mat)
        assert abs(np.trace(out.mat) - tr_a) <= 1e-10 * max(abs(tr_a), 1.0)

    def test_eigenvalues_preserved_under_orthogonal_basis(self):
        rng = np.random.default_rng(13)
        a = random_symmetric(rng, 6)
        q = sym_eigen(random_symmetric(rng, 6)).basis
        before = sym_eigen(a).eigenvalues
        after = sym_eigen(conjugate(a, q)).eigenvalues
        np.testing.assert_allclose(before, after, atol=1e-8)

    def test_dim_mismatch(self):
        a = random_symmetric(np.random.default_rng(0), 4)
        with pytest.raises(InvalidInputError):
            conjugate(a, np.eye(5))


class TestArrayOps:
    def test_matmul_identity(self):
        a = random_symmetric(np.random.default_rng(1), 4)
        np.testing.assert_array_equal(matmul(a, np.eye(4)), a.mat)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_frobenius_norm_hand_value(self):
        assert frobenius_norm(np.diag([3.0, 4.0])) == 5.0

    def test_scale_by_zero(self):
        v = as_vector([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(scale(v, 0.0), np.zeros(3))

    def test_add_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            add(np.zeros(3), np.zeros(4))

    def test_as_vector_rejects_nan(self):
        with pytest.raises(InvalidInputError):
            as_vector([1.0, np.nan])
