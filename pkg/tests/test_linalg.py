import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latentfold.linalg import (
    NumericalError,
    Rng,
    ShapeError,
    finite_diff_grad,
    gaussian_affinity,
    laplacian_apply,
    matmul,
    pca_project,
    row_normalize,
)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def triple_loop(A, B):
    out = np.zeros((A.shape[0], B.shape[1]))
    for i in range(A.shape[0]):
        for j in range(B.shape[1]):
            for k in range(A.shape[1]):
                out[i, j] += A[i, k] * B[k, j]
    return out


def test_matmul_examples():
    np.testing.assert_array_equal(matmul(np.eye(2), [[1, 2], [3, 4]]), [[1, 2], [3, 4]])
    np.testing.assert_array_equal(matmul([[1, 0]], [[2], [5]]), [[2]])
    rng = Rng(11)
    A, B = rng.gaussian((3, 4)), rng.gaussian((4, 2))
    np.testing.assert_allclose(matmul(A, B), triple_loop(A, B), rtol=1e-13, atol=1e-14)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_matmul_associative(seed):
    rng = Rng(seed)
    A, B, C = rng.gaussian((3, 5)), rng.gaussian((5, 4)), rng.gaussian((4, 2))
    left, right = matmul(matmul(A, B), C), matmul(A, matmul(B, C))
    assert np.max(np.abs(left - right)) <= 1e-10 * np.max(np.abs(left))


def test_row_normalize_examples():
    np.testing.assert_allclose(row_normalize([[3.0, 4.0]]), [[0.6, 0.8]], atol=1e-15)
    np.testing.assert_array_equal(row_normalize([[0.0, 0.0]]), [[0.0, 0.0]])
    unit = np.array([[1 / math.sqrt(2), 1 / math.sqrt(2)], [0.0, 1.0]])
    np.testing.assert_allclose(row_normalize(unit), unit, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 3), elements=finite))
def test_row_normalize_idempotent(X):
    once = row_normalize(X)
    np.testing.assert_array_equal(row_normalize(once), once)
    norms = np.linalg.norm(once, axis=1)
    big = np.linalg.norm(X, axis=1) >= 1e-12
    np.testing.assert_allclose(norms[big], 1.0, atol=1e-15)


def test_gaussian_affinity_examples():
    W = gaussian_affinity([[0.0, 0.0], [1.0, 0.0]])
    assert W[0, 1] == pytest.approx(0.367879441171, abs=1e-12)
    assert W[0, 0] == 0.0 and W[1, 0] == W[0, 1]
    assert gaussian_affinity([[2.0, 1.0], [2.0, 1.0]])[0, 1] == 1.0
    np.testing.assert_array_equal(gaussian_affinity([[1.0, 2.0]]), [[0.0]])


def test_laplacian_examples():
    L = laplacian_apply([[0.0, 0.0], [1.0, 0.0]])
    e = math.exp(-1)
    np.testing.assert_allclose(L, [[e, 0.0], [-e, 0.0]], atol=1e-12)
    np.testing.assert_array_equal(laplacian_apply(np.ones((4, 3))), np.zeros((4, 3)))
    np.testing.assert_array_equal(laplacian_apply([[5.0, -1.0]]), [[0.0, 0.0]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(-2, 2)))
def test_laplacian_rows_sum_to_zero(X):
    assert np.abs(laplacian_apply(X).sum(axis=0)).max() < 1e-10


def test_laplacian_brute_force():
    rng = Rng(3)
    X = rng.gaussian((5, 3))
    expected = np.zeros_like(X)
    for i in range(5):
        for j in range(5):
            if i != j:
                expected[i] += math.exp(-np.sum((X[i] - X[j]) ** 2)) * (X[j] - X[i])
    np.testing.assert_allclose(laplacian_apply(X), expected, atol=1e-14)


def test_finite_diff_examples():
    g = finite_diff_grad(lambda X: float(np.sum(X ** 2)), [[1.0, 2.0]], 1e-5)
    np.testing.assert_allclose(g, [[2.0, 4.0]], atol=1e-8)
    np.testing.assert_array_equal(finite_diff_grad(lambda X: 3.0, np.ones((2, 2))), np.zeros((2, 2)))
    with pytest.raises(NumericalError):
        finite_diff_grad(lambda X: float("nan"), np.ones((1, 1)))


def test_pca_collinear_second_axis_vanishes():
    P = pca_project([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]], 2)
    assert np.abs(P[:, 1]).max() < 1e-8
    np.testing.assert_allclose(np.abs(P[:, 0]), [1.0, 0.0, 1.0], atol=1e-12)


def test_pca_centered_1d_recovers_values():
    v = np.array([[-2.0], [0.5], [1.5]])
    P = pca_project(v, 1)
    assert np.allclose(P, v) or np.allclose(P, -v)


@pytest.mark.parametrize("seed", range(3))
def test_pca_full_rank_preserves_variance_and_orthogonality(seed):
    rng = Rng(seed)
    X = rng.gaussian((20, 4)) @ rng.gaussian((4, 4))
    P = pca_project(X, 4)
    Xc = X - X.mean(axis=0)
    assert abs(np.sum(P ** 2) - np.sum(Xc ** 2)) < 1e-8 * np.sum(Xc ** 2)
    G = P.T @ P
    off = G - np.diag(np.diag(G))
    assert np.abs(off).max() < 1e-8 * np.abs(G).max()


def test_pca_sign_convention_and_errors():
    rng = Rng(9)
    X = rng.gaussian((10, 3))
    np.testing.assert_array_equal(pca_project(X, 2), pca_project(X.copy(), 2))
    with pytest.raises(ShapeError):
        pca_project(X, 4)
    with pytest.raises(ShapeError):
        pca_project(X[:1], 1)


def test_rng_determinism_and_ranges():
    a, b = Rng(42), Rng(42)
    assert [a.uniform() for _ in range(1000)] == [b.uniform() for _ in range(1000)]
    u = Rng(1).uniform(100_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    g = Rng(2).gaussian(100_000)
    assert abs(g.mean()) < 0.02
    assert abs(g.std() - 1.0) < 0.02


def test_rng_gaussian_is_box_muller_of_uniforms():
    r1, r2 = Rng(5), Rng(5)
    z = r1.gaussian()
    u1, u2 = r2.uniform(), r2.uniform()
    assert z == pytest.approx(math.sqrt(-2 * math.log1p(-u1)) * math.cos(2 * math.pi * u2), rel=1e-14)


def test_rng_permutation():
    p = Rng(8).permutation(50)
    assert sorted(p.tolist()) == list(range(50))
    np.testing.assert_array_equal(p, Rng(8).permutation(50))
    assert len(set(Rng(0).choice_distinct(10, 4).tolist())) == 4
