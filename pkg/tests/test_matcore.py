import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mgpvae.errors import DimensionError, NumericalError
from mgpvae.matcore import THETA_13, cholesky, kron, matexp, solve_psd
from mgpvae.ssk import KernelSpec, gram, to_state_space

from conftest import random_spd


def taylor_expm(M, terms=30):
    out = np.eye(len(M))
    term = np.eye(len(M))
    for k in range(1, terms + 1):
        term = term @ M / k
        out = out + term
    return out


def mp_expm(M):
    return np.array(mpmath.expm(mpmath.matrix(M.tolist())).tolist(), dtype=float)


class TestMatexp:
    def test_zero_gives_identity(self):
        np.testing.assert_array_equal(matexp(np.zeros((2, 2))), np.eye(2))

    def test_diagonal(self):
        np.testing.assert_allclose(matexp(np.diag([1.0, 2.0])), np.diag([math.e, math.e ** 2]), rtol=1e-14)

    @pytest.mark.parametrize("dt", [0.1, 0.7, 1.5])
    def test_matern32_against_taylor(self, dt):
        F = to_state_space(KernelSpec.create("matern32", 1.0, 1.0)).F
        ref = taylor_expm(dt * F)
        assert np.max(np.abs(matexp(dt * F) - ref)) / np.max(np.abs(ref)) < 1e-12

    def test_large_norm_against_high_precision(self, rng):
        M = 4.0 * rng.standard_normal((4, 4))
        assert np.abs(M).sum(axis=0).max() > THETA_13       # forces squaring
        ref = mp_expm(M)
        assert np.max(np.abs(matexp(M) - ref)) / np.max(np.abs(ref)) < 1e-11

    def test_batched_matches_single(self, rng):
        Ms = rng.standard_normal((5, 3, 3))
        batch = matexp(Ms)
        for M, E in zip(Ms, batch):
            np.testing.assert_allclose(E, mp_expm(M), rtol=1e-12, atol=1e-13)

    def test_non_square_rejected(self):
        with pytest.raises(DimensionError):
            matexp(np.zeros((2, 3)))

    def test_non_finite_rejected(self):
        with pytest.raises(NumericalError):
            matexp(np.array([[np.nan, 0.0], [0.0, 1.0]]))

    @given(arrays(np.float64, (3, 3), elements=st.floats(-10 / 3, 10 / 3)))
    def test_inverse_property(self, M):
        np.testing.assert_allclose(matexp(M) @ matexp(-M), np.eye(3), atol=1e-10 * max(1.0, np.abs(matexp(M)).max() * np.abs(matexp(-M)).max()))

    @given(st.floats(0, 5), st.floats(0, 5), st.sampled_from(["matern32", "matern52"]), st.floats(0.2, 3.0))
    def test_semigroup(self, s, t, family, ell):
        F = to_state_space(KernelSpec.create(family, 1.0, ell)).F
        np.testing.assert_allclose(matexp((s + t) * F), matexp(s * F) @ matexp(t * F), atol=1e-10)


class TestCholesky:
    def test_identity(self):
        np.testing.assert_array_equal(cholesky(np.eye(3)).lower, np.eye(3))

    def test_scalar(self):
        assert cholesky(np.array([[4.0]])).lower[0, 0] == 2.0

    def test_matern_gram_reconstruction(self, rng):
        K = gram(KernelSpec.create("matern32", 1.0, 1.0), np.sort(rng.uniform(0, 5, 5)))
        ch = cholesky(K)
        assert np.max(np.abs(ch.reconstruct() - K)) / np.max(np.abs(K)) < 1e-9
        assert np.all(np.diag(ch.lower) > 0)

    def test_jitter_escalates_on_singular(self):
        ch = cholesky(np.ones((3, 3)))
        assert ch.jitter > 0
        np.testing.assert_allclose(ch.reconstruct(), np.ones((3, 3)) + ch.jitter * np.eye(3), atol=1e-14)

    def test_failure_reports_jitter(self):
        with pytest.raises(NumericalError) as exc:
            cholesky(-np.eye(2))
        assert exc.value.jitter == 1e-6

    def test_asymmetric_rejected(self):
        with pytest.raises(DimensionError):
            cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_logdet(self, rng):
        M = random_spd(rng, 5)
        assert cholesky(M).logdet() == pytest.approx(np.linalg.slogdet(M)[1], rel=1e-12)


class TestSolvePsd:
    def test_identity(self, rng):
        B = rng.standard_normal((3, 2))
        np.testing.assert_allclose(solve_psd(cholesky(np.eye(3)), B), B)

    def test_scaled_identity(self):
        np.testing.assert_allclose(solve_psd(cholesky(2 * np.eye(3)), np.eye(3)), 0.5 * np.eye(3), rtol=1e-15)

    def test_residual_6x6(self, rng):
        M = random_spd(rng, 6, cond=100)
        B = rng.standard_normal((6, 3))
        assert np.max(np.abs(M @ solve_psd(cholesky(M), B) - B)) < 1e-10

    def test_vector_rhs(self, rng):
        M = random_spd(rng, 4)
        b = rng.standard_normal(4)
        np.testing.assert_allclose(M @ solve_psd(cholesky(M), b), b, atol=1e-12)

    def test_batched(self, rng):
        Ms = np.stack([random_spd(rng, 3) for _ in range(4)])
        B = rng.standard_normal((4, 3, 2))
        np.testing.assert_allclose(Ms @ solve_psd(cholesky(Ms), B), B, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            solve_psd(cholesky(np.eye(3)), np.ones((2, 2)))

    @given(st.integers(1, 32), st.integers(0, 2**32 - 1))
    def test_solve_then_multiply_is_identity(self, n, seed):
        r = np.random.default_rng(seed)
        M = random_spd(r, n, cond=1e3)
        X = solve_psd(cholesky(M), np.eye(n))
        np.testing.assert_allclose(M @ X, np.eye(n), atol=1e-9)


class TestKron:
    def test_identity_block_diagonal(self, rng):
        M = rng.standard_normal((2, 3))
        K = kron(np.eye(2), M)
        np.testing.assert_array_equal(K[:2, :3], M)
        np.testing.assert_array_equal(K[2:, 3:], M)
        np.testing.assert_array_equal(K[:2, 3:], 0)

    def test_scalar(self, rng):
        M = rng.standard_normal((2, 2))
        np.testing.assert_array_equal(kron([[2.0]], M), 2 * M)

    @given(st.integers(0, 2**32 - 1))
    def test_mixed_product(self, seed):
        r = np.random.default_rng(seed)
        A, B, C, D = (r.standard_normal((2, 2)) for _ in range(4))
        lhs = kron(A, B) @ kron(C, D)
        rhs = kron(A @ C, B @ D)
        assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(rhs)))
