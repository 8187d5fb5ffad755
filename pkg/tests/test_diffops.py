from fractions import Fraction
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qtrend.diffops import (
    adjusted_diff,
    assemble_D,
    assemble_precision,
    banded_to_dense,
    cholesky,
    dense_to_banded,
    solve_gaussian_summary,
    standard_diff,
)
from qtrend.errors import DomainError, InvalidDimensionError, InvalidGridError, NumericalBreakdown
from qtrend.diffops import PrecisionSystem

from support import brute_force_diff, exact_D


def random_spd_banded(rng, n, bw):
    D = rng.normal(size=(n, n))
    mask = np.abs(np.subtract.outer(np.arange(n), np.arange(n))) <= bw // 2
    L = np.tril(D * mask)
    A = L @ L.T + n * np.eye(n)
    band = np.abs(np.subtract.outer(np.arange(n), np.arange(n))) <= bw
    return A * band


class TestStandardDiff:
    def test_first_order_rows(self):
        np.testing.assert_array_equal(
            standard_diff(4, 1), [[1, -1, 0, 0], [0, 1, -1, 0], [0, 0, 1, -1]]
        )

    def test_second_order_single_row(self):
        np.testing.assert_array_equal(standard_diff(3, 2), [[1, -2, 1]])

    def test_third_order_binomial_rows(self):
        mat = standard_diff(5, 3)
        assert mat.shape == (2, 5)
        np.testing.assert_array_equal(mat[0], [1, -3, 3, -1, 0])
        np.testing.assert_array_equal(mat[1], [0, 1, -3, 3, -1])

    @pytest.mark.parametrize("n, order", [(4, 1), (6, 2), (9, 4)])
    def test_row_sums_vanish(self, n, order):
        np.testing.assert_array_equal(standard_diff(n, order).sum(axis=1), 0.0)

    @pytest.mark.parametrize("n, order", [(3, 3), (1, 1), (5, 0)])
    def test_invalid_dimension(self, n, order):
        with pytest.raises(InvalidDimensionError):
            standard_diff(n, order)


class TestAdjustedDiff:
    def test_unit_grid_reduces_to_standard(self):
        np.testing.assert_array_equal(adjusted_diff([1, 2, 3, 4], 2), standard_diff(4, 2))

    def test_irregular_exact_row(self):
        mat = adjusted_diff([Fraction(0), Fraction(1), Fraction(3)], 2)
        assert mat.tolist() == [[Fraction(1), Fraction(-3, 2), Fraction(1, 2)]]

    def test_spacing_two_halves_second_order(self):
        np.testing.assert_allclose(adjusted_diff([0, 2, 4, 6], 2), 0.5 * standard_diff(4, 2), rtol=0, atol=1e-15)

    @pytest.mark.parametrize("order", [1, 2, 3])
    @pytest.mark.parametrize("h", [0.5, 2.0, 3.0])
    def test_uniform_spacing_scales_by_power(self, order, h):
        n = 10
        x = h * np.arange(n)
        np.testing.assert_allclose(adjusted_diff(x, order), standard_diff(n, order) * h ** (1 - order), rtol=1e-13)

    def test_non_increasing_grid_rejected(self):
        with pytest.raises(InvalidGridError):
            adjusted_diff([0.0, 1.0, 1.0, 2.0], 2)


class TestAssembleD:
    def test_k0_small(self):
        np.testing.assert_array_equal(assemble_D(3, 0).dense(), [[1, 0, 0], [1, -1, 0], [0, 1, -1]])

    def test_determinant_nonzero(self):
        det = np.linalg.det(assemble_D(10, 1).dense())
        assert abs(abs(det) - 1.0) < 1e-12

    def test_too_small(self):
        with pytest.raises(InvalidDimensionError):
            assemble_D(2, 1)

    def test_rational_oracle_all_small_cases(self):
        for n, k in product(range(2, 13), range(0, 4)):
            if n <= k + 1:
                continue
            assert assemble_D(n, k).dense().tolist() == exact_D(n, k)

    def test_irregular_rational_oracle(self):
        rng = np.random.default_rng(3)
        for n, k in product(range(3, 13), range(1, 4)):
            if n <= k + 1:
                continue
            steps = [Fraction(int(s), 7) for s in rng.integers(1, 20, n)]
            x = [sum(steps[: i + 1], Fraction(0)) for i in range(n)]
            got = assemble_D(n, k, np.array(x, dtype=object)).dense().tolist()
            assert got == exact_D(n, k, x)
            assert adjusted_diff(np.array(x, dtype=object), k + 1).tolist() == brute_force_diff(x, k + 1)

    @given(st.integers(2, 12), st.integers(0, 3))
    def test_invertible_with_identity_top(self, n, k):
        if n <= k + 1:
            return
        D = assemble_D(n, k)
        dense = D.dense()
        np.testing.assert_array_equal(dense[: k + 1, : k + 1], np.eye(k + 1))
        assert np.all(np.triu(dense, 1) == 0)
        assert np.all(np.tril(dense, -(k + 2)) == 0)
        eta = np.linspace(-1, 1, n)
        np.testing.assert_allclose(D.apply(D.solve(eta)), eta, atol=1e-9)

    def test_apply_matches_dense(self):
        rng = np.random.default_rng(0)
        x = np.cumsum(rng.uniform(0.1, 2.0, 15))
        D = assemble_D(15, 2, x)
        theta = rng.normal(size=15)
        np.testing.assert_allclose(D.apply(theta), D.dense() @ theta, atol=1e-12)


class TestPrecision:
    def test_tridiagonal_example(self):
        sys = assemble_precision(assemble_D(3, 0), np.ones(3), 0.0)
        np.testing.assert_array_equal(sys.dense(), [[2, -1, 0], [-1, 2, -1], [0, -1, 1]])

    def test_extra_diagonal_adds(self):
        D = assemble_D(6, 1)
        base = assemble_precision(D, np.ones(6), 0.0).dense()
        shifted = assemble_precision(D, np.ones(6), 2.5).dense()
        np.testing.assert_allclose(shifted - base, 2.5 * np.eye(6))

    @given(st.integers(3, 30), st.integers(0, 3), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_matches_dense_product_and_symmetric(self, n, k, seed):
        if n <= k + 1:
            return
        rng = np.random.default_rng(seed)
        D = assemble_D(n, k, np.cumsum(rng.uniform(0.2, 1.5, n)))
        w = rng.uniform(0.1, 5.0, n)
        e = rng.uniform(0.0, 2.0, n)
        A = assemble_precision(D, w, e).dense()
        Dd = D.dense()
        np.testing.assert_allclose(A, Dd.T @ np.diag(w) @ Dd + np.diag(e), rtol=1e-12, atol=1e-12)
        assert np.max(np.abs(A - A.T)) == 0.0
        assert assemble_precision(D, w, e).bandwidth <= 2 * (k + 1)
        assert np.all(np.linalg.eigvalsh(A) > 0)

    def test_nonpositive_weight_rejected(self):
        with pytest.raises(DomainError):
            assemble_precision(assemble_D(4, 0), np.array([1.0, 0.0, 1.0, 1.0]), 0.0)

    def test_banded_roundtrip(self):
        rng = np.random.default_rng(1)
        A = random_spd_banded(rng, 9, 3)
        np.testing.assert_array_equal(banded_to_dense(dense_to_banded(A, 3)), A)


class TestGaussianSummary:
    def test_identity(self):
        sys = PrecisionSystem(A=dense_to_banded(np.eye(3), 0), b=np.array([1.0, 2.0, 3.0]))
        D = assemble_D(3, 0)
        mean, var, _ = solve_gaussian_summary(sys, D)
        np.testing.assert_allclose(mean, [1, 2, 3])
        np.testing.assert_allclose(var, [1, 1, 1])

    def test_eta2_for_identity_rows_equals_var(self):
        rng = np.random.default_rng(2)
        D = assemble_D(8, 0)
        A = D.dense().T @ np.diag(rng.uniform(1, 3, 8)) @ D.dense() + np.eye(8)
        sys = PrecisionSystem(A=dense_to_banded(A, 1), b=np.zeros(8))
        _, var, eta2 = solve_gaussian_summary(sys, D)
        # first row of D is e_1
        assert eta2[0] == pytest.approx(var[0], rel=1e-12)

    def test_random_spd_against_dense_inverse(self):
        rng = np.random.default_rng(4)
        A = random_spd_banded(rng, 8, 2)
        b = rng.normal(size=8)
        D = assemble_D(8, 1)
        mean, var, eta2 = solve_gaussian_summary(PrecisionSystem(dense_to_banded(A, 2), b), D)
        Ainv = np.linalg.inv(A)
        np.testing.assert_allclose(mean, np.linalg.solve(A, b), atol=1e-10)
        np.testing.assert_allclose(var, np.diag(Ainv), atol=1e-10)
        Dd = D.dense()
        np.testing.assert_allclose(eta2, np.einsum("ij,jk,ik->i", Dd, Ainv, Dd), atol=1e-10)

    @given(st.integers(4, 50), st.integers(0, 3), st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_property_dense_oracle(self, n, k, seed):
        if n <= k + 1:
            return
        rng = np.random.default_rng(seed)
        D = assemble_D(n, k)
        sys = assemble_precision(D, rng.uniform(0.2, 4.0, n), rng.uniform(0.1, 3.0, n), rng.normal(size=n))
        mean, var, eta2 = solve_gaussian_summary(sys, D)
        A = sys.dense()
        Ainv = np.linalg.inv(A)
        Dd = D.dense()
        np.testing.assert_allclose(mean, np.linalg.solve(A, sys.b), rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(var, np.diag(Ainv), rtol=1e-10)
        np.testing.assert_allclose(eta2, np.einsum("ij,jk,ik->i", Dd, Ainv, Dd), rtol=1e-9)

    def test_breakdown_carries_pivot(self):
        A = np.diag([1.0, 2.0, -5.0, 1.0])
        with pytest.raises(NumericalBreakdown) as info:
            cholesky(dense_to_banded(A, 0))
        assert info.value.pivot == 2

    def test_jitter_rescues_semidefinite(self):
        # rank-deficient PSD: exact zero pivot, rescued by the single jittered retry
        ab = dense_to_banded(np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]), 1)
        factor = cholesky(ab)
        assert factor.jitter > 0

    def test_solve_lt_gives_correct_covariance(self):
        rng = np.random.default_rng(5)
        A = random_spd_banded(rng, 6, 2)
        factor = cholesky(dense_to_banded(A, 2))
        cols = np.column_stack([factor.solve_lt(e) for e in np.eye(6)])
        np.testing.assert_allclose(cols @ cols.T, np.linalg.inv(A), atol=1e-12)
        assert factor.logdet() == pytest.approx(np.linalg.slogdet(A)[1], rel=1e-12)
