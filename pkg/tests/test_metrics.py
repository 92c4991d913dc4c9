"""Error measures and the power-iteration operator norm."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from gfmm import tensor as T
from gfmm.errors import DimensionError, NumericalError, UndefinedMetricError
from gfmm.metrics import eps_be, eps_rel, eps_res, matrix_2norm, mse_loss
from gfmm.problems import Darcy1D, darcy_apply, darcy_matrix, poisson2d_apply, poisson_apply


def dense_laplacian(D):
    return 2 * np.eye(D) - np.eye(D, k=1) - np.eye(D, k=-1)


class TestMSE:
    def test_examples(self):
        u = np.array([1.0, 3.0])
        assert mse_loss(u, u) == 0
        assert mse_loss(u + 1, u) == 1
        assert mse_loss(np.zeros(2), u) == 5

    def test_tensor_path(self):
        out = mse_loss(T.Tensor(np.zeros(2)), np.array([1.0, 3.0]))
        assert isinstance(out, T.Tensor) and out.item() == 5

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mse_loss(np.zeros(3), np.zeros(2))


class TestRelative:
    def test_examples(self):
        u = np.array([3.0, 4.0])
        assert eps_rel(u, u) == 0
        assert eps_rel(2 * u, u) == 1
        assert eps_rel(0 * u, u) == 1

    def test_zero_reference(self):
        with pytest.raises(UndefinedMetricError):
            eps_rel(np.ones(3), np.zeros(3))

    def test_batched(self):
        u = np.array([[1.0, 0.0], [0.0, 2.0]])
        assert_allclose(eps_rel(np.zeros((2, 2)), u, axes=1), [1, 1])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31), st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3))
    def test_scale_invariant(self, seed, s):
        u, v = np.random.default_rng(seed).standard_normal((2, 17))
        assert abs(eps_rel(s * v, s * u) - eps_rel(v, u)) <= 1e-12 * max(1.0, eps_rel(v, u))


class TestBackward:
    def test_zero_prediction(self):
        c = np.random.default_rng(0).standard_normal(8)
        assert eps_be(poisson_apply, 4.0, np.zeros(8), c) == pytest.approx(1.0)

    def test_exact_solve(self):
        A = dense_laplacian(64)
        c = np.random.default_rng(1).standard_normal(64)
        u = np.linalg.solve(A, c)
        assert eps_be(poisson_apply, np.linalg.norm(A, 2), u, c) <= 1e-14

    def test_dense_formula(self):
        rng = np.random.default_rng(2)
        A = rng.standard_normal((6, 6))
        u, c = rng.standard_normal((2, 6))
        nA = np.linalg.norm(A, 2)
        want = np.linalg.norm(A @ u - c) / (nA * np.linalg.norm(u) + np.linalg.norm(c))
        assert eps_be(lambda x: x @ A.T, nA, u, c) == pytest.approx(want, rel=1e-13)

    def test_zero_denominator(self):
        with pytest.raises(UndefinedMetricError):
            eps_be(poisson_apply, 4.0, np.zeros(4), np.zeros(4))

    def test_power_norm_matches_closed_form(self):
        D = 256
        rng = np.random.default_rng(3)
        u, c = rng.standard_normal((2, 4, D))
        exact = 2 - 2 * np.cos(D * np.pi / (D + 1))
        a = eps_be(poisson_apply, exact, u, c)
        b = eps_be(poisson_apply, matrix_2norm(poisson_apply, D), u, c)
        assert np.max(np.abs(a - b) / a) <= 1e-4


class TestResidual:
    def test_zero_prediction(self):
        c = np.array([[3.0, 4.0]])
        inner, bnd = eps_res(0 - c, np.array([-2.5]))
        assert_allclose(inner, [5.0])
        assert_allclose(bnd, [2.5])

    def test_no_boundary(self):
        inner, bnd = eps_res(np.zeros(4))
        assert inner == 0 and bnd is None


class TestMatrixNorm:
    def test_identity(self):
        assert matrix_2norm(lambda x: x, 5) == pytest.approx(1.0, rel=1e-6)

    def test_diagonal(self):
        d = np.array([3.0, 1.0])
        assert matrix_2norm(lambda x: d * x, 2) == pytest.approx(3.0, rel=1e-6)

    def test_laplacian_256(self):
        # largest eigenvalue 2 - 2 cos(256 pi / 257) = 2 + 2 cos(pi / 257)
        want = np.max(np.linalg.eigvalsh(dense_laplacian(256)))
        assert want == pytest.approx(2 + 2 * np.cos(np.pi / 257), rel=1e-13)
        assert matrix_2norm(poisson_apply, 256) == pytest.approx(want, rel=1e-5)

    def test_nonsymmetric_needs_transpose(self):
        A = np.array([[1.0, 5.0], [0.0, 1.0]])
        got = matrix_2norm(lambda x: A @ x, 2, apply_t=lambda x: A.T @ x, tol=1e-10)
        assert got == pytest.approx(np.linalg.norm(A, 2), rel=1e-8)

    def test_2d_laplacian(self):
        N = 32
        want = 2 * (2 + 2 * np.cos(np.pi / (N + 1)))
        assert matrix_2norm(poisson2d_apply, (N, N)) == pytest.approx(want, rel=1e-5)

    def test_batched_darcy(self):
        p = Darcy1D(64)
        _, aux = p.sample_coefficients(np.random.default_rng(0), 6, dtype=np.float64)
        ah = p.half_points(aux["a_nodes"])
        got = matrix_2norm(lambda u: darcy_apply(ah, u, h=p.grid.h), (6, 64), batched=True)
        for i in range(6):
            sub, diag, sup = darcy_matrix(ah[i], p.grid.h)
            A = np.diag(diag) + np.diag(sub[1:], -1) + np.diag(sup[:-1], 1)
            assert got[i] == pytest.approx(np.linalg.norm(A, 2), rel=1e-5)

    def test_zero_operator(self):
        assert matrix_2norm(lambda x: 0 * x, 3) == 0

    def test_non_convergence(self):
        # the top two eigenvalues nearly coincide, so three steps cannot settle
        with pytest.raises(NumericalError):
            matrix_2norm(poisson_apply, 256, max_iter=3)
