"""Numeric kernel contracts: matmul, softmax, finite differences, RNG."""

import mpmath
import numpy as np
import pytest

from gridssl.numkit import (
    Rng,
    ShapeError,
    finite_diff_grad,
    matmul,
    matrix,
    rng_bernoulli,
    rng_gaussian,
    rng_uniform,
    softmax_rows,
)


class TestMatrix:
    def test_identity_product(self):
        a = matrix([[1, 2], [3, 4]])
        eye = matrix([[1, 0], [0, 1]])
        assert np.array_equal(matmul(a, eye), a)

    def test_dot_product(self):
        assert matmul(matrix([[1, 2]]), matrix([[3], [4]]))[0, 0] == 11.0

    def test_matches_triple_loop_oracle(self):
        rng = Rng(123)
        a = rng.gaussian(7, 5)
        b = rng.gaussian(5, 3)
        expected = np.zeros((7, 3))
        for i in range(7):
            for j in range(3):
                for k in range(5):
                    expected[i, j] += a[i, k] * b[k, j]
        assert np.max(np.abs(matmul(a, b) - expected)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(matrix([[1, 2]]), matrix([[1, 2]]))

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            matrix([[1.0, np.nan]])
        with pytest.raises(ValueError):
            matrix([[np.inf]])

    def test_associativity(self):
        rng = Rng(7)
        for _ in range(10):
            a, b, c = rng.gaussian(4, 5), rng.gaussian(5, 6), rng.gaussian(6, 3)
            left = matmul(matmul(a, b), c)
            right = matmul(a, matmul(b, c))
            rel = np.max(np.abs(left - right)) / max(np.max(np.abs(left)), 1e-300)
            assert rel < 1e-9


class TestSoftmaxRows:
    def test_symmetry(self):
        out = softmax_rows(matrix([[0.0, 0.0, 0.0]]))
        assert np.max(np.abs(out - 1.0 / 3.0)) < 1e-15

    def test_large_logit_no_overflow(self):
        out = softmax_rows(matrix([[1000.0, 0.0, 0.0]]))
        assert np.all(np.isfinite(out))
        assert np.max(np.abs(out - [1.0, 0.0, 0.0])) < 1e-12

    def test_against_extended_precision_oracle(self):
        row = [1.0, 2.0, 3.0]
        with mpmath.workdps(50):
            exps = [mpmath.exp(v) for v in row]
            total = sum(exps)
            expected = np.array([float(e / total) for e in exps])
        out = softmax_rows(matrix([row]))[0]
        assert np.max(np.abs(out - expected)) < 1e-15

    def test_rows_sum_to_one_and_positive(self):
        rng = Rng(11)
        m = rng.gaussian(20, 9, 0.0, 50.0)
        out = softmax_rows(m)
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) < 1e-12
        assert np.all(out > 0.0)


class TestFiniteDiff:
    def test_quadratic(self):
        g = finite_diff_grad(lambda x: float((x**2).sum()), matrix([[1.0, 2.0]]), eps=1e-5)
        assert np.max(np.abs(g - [[2.0, 4.0]])) < 1e-6

    def test_constant_function(self):
        g = finite_diff_grad(lambda x: 3.5, matrix([[1.0, 2.0], [3.0, 4.0]]), eps=1e-5)
        assert np.array_equal(g, np.zeros((2, 2)))

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda x: 0.0, matrix([[1.0]]), eps=0.0)


class TestRng:
    def test_keep_all(self):
        assert np.array_equal(rng_bernoulli(Rng(1), 4, 4, 1.0), np.ones((4, 4)))

    def test_keep_none(self):
        assert np.array_equal(rng_bernoulli(Rng(1), 4, 4, 0.0), np.zeros((4, 4)))

    def test_law_of_large_numbers(self):
        mask = rng_bernoulli(Rng(99), 1000, 100, 0.5)
        assert 0.49 <= mask.mean() <= 0.51

    def test_same_seed_byte_identical(self):
        a = rng_gaussian(Rng(12345), 16, 16)
        b = rng_gaussian(Rng(12345), 16, 16)
        assert a.tobytes() == b.tobytes()
        u1 = rng_uniform(Rng(5, tag=3), 8, 8)
        u2 = rng_uniform(Rng(5, tag=3), 8, 8)
        assert u1.tobytes() == u2.tobytes()

    def test_child_streams_independent(self):
        root = Rng(77)
        a = root.child(1).gaussian(4, 4)
        b = root.child(2).gaussian(4, 4)
        assert a.tobytes() != b.tobytes()
        assert Rng(77).child(1).gaussian(4, 4).tobytes() == a.tobytes()

    def test_negative_std_rejected(self):
        with pytest.raises(ValueError):
            Rng(1).gaussian(2, 2, 0.0, -1.0)

    def test_bad_p_keep_rejected(self):
        with pytest.raises(ValueError):
            Rng(1).bernoulli(2, 2, 1.5)
