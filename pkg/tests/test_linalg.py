from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uprlhf import numerics as nx
from uprlhf.linalg import frobenius_norm, nnm_ratio, nnm_ratio_with_grad, nuclear_norm, svd

from conftest import numeric_grad
from oracles import singular_values_via_eigen


def _random_matrix(seed):
    rng = nx.make_rng(seed, "linalg", "matrix")
    p, d = (int(v) for v in rng.integers(1, 9, size=2))
    return rng.normal(size=(p, d))


@pytest.mark.parametrize("seed", range(20))
def test_svd_reconstructs_and_matches_eigen_oracle(seed):
    a = _random_matrix(seed)
    u, s, v = svd(a)
    assert np.abs(u @ np.diag(s) @ v.T - a).max() < 1e-8
    np.testing.assert_allclose(s, singular_values_via_eigen(a)[: len(s)], atol=1e-9, rtol=0)


def test_svd_agrees_with_lapack():
    a = _random_matrix(99)
    np.testing.assert_allclose(svd(a).S, np.linalg.svd(a, compute_uv=False), atol=1e-12)


def test_svd_factors_are_orthonormal():
    a = np.random.default_rng(1).normal(size=(7, 4))
    u, s, v = svd(a)
    np.testing.assert_allclose(u.T @ u, np.eye(4), atol=1e-12)
    np.testing.assert_allclose(v.T @ v, np.eye(4), atol=1e-12)
    assert np.all(np.diff(s) <= 0)


def test_svd_wide_matrix():
    a = np.random.default_rng(2).normal(size=(3, 8))
    u, s, v = svd(a)
    assert u.shape == (3, 3) and v.shape == (8, 3)
    np.testing.assert_allclose(u @ np.diag(s) @ v.T, a, atol=1e-12)


def test_svd_sign_convention():
    a = np.random.default_rng(3).normal(size=(5, 3))
    u = svd(a).U
    for k in range(u.shape[1]):
        assert u[np.argmax(np.abs(u[:, k])), k] > 0


def test_svd_rank_deficient_completes_basis():
    rng = np.random.default_rng(4)
    a = np.outer(rng.normal(size=6), rng.normal(size=4))
    u, s, v = svd(a)
    assert s[1:].max() < 1e-12
    np.testing.assert_allclose(u.T @ u, np.eye(4), atol=1e-12)
    np.testing.assert_allclose(u @ np.diag(s) @ v.T, a, atol=1e-12)


def test_svd_zero_matrix():
    u, s, v = svd(np.zeros((3, 2)))
    np.testing.assert_array_equal(s, [0.0, 0.0])
    np.testing.assert_allclose(u.T @ u, np.eye(2), atol=1e-12)


def test_svd_rejects_bad_input():
    from uprlhf.numerics import DomainError

    with pytest.raises(DomainError):
        svd(np.zeros((0, 3)))
    with pytest.raises(DomainError):
        svd(np.array([[np.nan]]))


def test_nuclear_norm_of_identity():
    assert nuclear_norm(np.eye(4)) == pytest.approx(4.0, abs=1e-12)
    assert frobenius_norm(np.eye(4)) == pytest.approx(2.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-5, 5)))
def test_norm_inequalities(a):
    fro = frobenius_norm(a)
    nuc = nuclear_norm(a)
    rank = np.linalg.matrix_rank(a) if fro > 0 else 0
    assert fro <= nuc + 1e-8
    assert nuc <= math.sqrt(max(rank, 1)) * fro + 1e-8


def test_ratio_extremes():
    assert nnm_ratio_with_grad(np.eye(5))[0] == pytest.approx(math.sqrt(5), abs=1e-12)
    rank_one = np.outer([1.0, 2.0, 3.0], [4.0, 5.0])
    assert nnm_ratio_with_grad(rank_one)[0] == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_ratio_gradient_matches_finite_differences(seed):
    a = np.random.default_rng(seed).normal(size=(8, 5))
    _, g = nnm_ratio_with_grad(a)
    num = numeric_grad(lambda: nnm_ratio_with_grad(a)[0], a)
    np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-7)


def test_ratio_tensor_backward_matches_numpy_gradient():
    a = np.random.default_rng(5).normal(size=(6, 3))
    t = nx.parameter(a)
    nx.backward(nnm_ratio(t))
    np.testing.assert_allclose(t.grad, nnm_ratio_with_grad(a)[1], atol=1e-14)


def test_ratio_invariant_to_duplicate_stacking():
    a = np.random.default_rng(6).normal(size=(4, 7))
    single = nnm_ratio_with_grad(a)[0]
    double = nnm_ratio_with_grad(np.vstack([a, a]))[0]
    assert abs(single - double) < 1e-10


def test_ratio_scale_invariant():
    a = np.random.default_rng(7).normal(size=(5, 5))
    assert nnm_ratio_with_grad(3.7 * a)[0] == pytest.approx(nnm_ratio_with_grad(a)[0], abs=1e-12)


def test_ratio_zero_matrix_is_domain_error():
    from uprlhf.numerics import DomainError

    with pytest.raises(DomainError):
        nnm_ratio_with_grad(np.zeros((3, 3)))
