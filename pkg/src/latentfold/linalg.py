"""Dense linear algebra, seeded randomness and graph operators.

Matrices are plain 2-D ``float64`` numpy arrays (rows = tokens, columns =
features). Every function here is pure: inputs are never modified.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

NORM_GUARD = 1e-12
UNIT_TOL = 4 * np.finfo(np.float64).eps


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


def as_mat(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {X.shape}")
    return X


def check_finite(X: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(X)):
        raise NumericalError(f"non-finite values in {what}")
    return X


def matmul(A, B) -> np.ndarray:
    A, B = as_mat(A), as_mat(B)
    if A.shape[1] != B.shape[0]:
        raise ShapeError(f"cannot multiply {A.shape} by {B.shape}")
    return A @ B


def row_normalize(X) -> np.ndarray:
    """Scale every row to unit L2 norm.

    Rows with norm < 1e-12 pass through, as do rows already unit-norm to
    within rounding (so the map is exactly idempotent).
    """
    X = as_mat(X)
    norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    out = X.copy()
    ok = (norms >= NORM_GUARD) & (np.abs(norms - 1.0) > UNIT_TOL)
    out[ok] = X[ok] / norms[ok, None]
    return out


def sq_distances(X) -> np.ndarray:
    X = as_mat(X)
    diff = X[:, None, :] - X[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def gaussian_affinity(X) -> np.ndarray:
    """w_ij = exp(-|x_i - x_j|^2) off the diagonal, zero on it."""
    W = np.exp(-sq_distances(X))
    np.fill_diagonal(W, 0.0)
    return W


def laplacian_apply(X, scale=None) -> np.ndarray:
    """Graph-Laplacian smoothing: row i is sum_j w_ij (x_j - x_i).

    ``scale`` optionally multiplies each feature column (diagonal diffusion
    tensor).
    """
    X = as_mat(X)
    W = gaussian_affinity(X)
    out = W @ X - W.sum(axis=1)[:, None] * X
    if scale is not None:
        out = out * np.asarray(scale, dtype=np.float64)[None, :]
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], X, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix."""
    if not h > 0:
        raise ValueError("step h must be positive")
    X = np.array(X, dtype=np.float64)
    grad = np.zeros_like(X)
    flat, gflat = X.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(X))
        flat[k] = orig - h
        fm = float(f(X))
        flat[k] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalError(f"non-finite function value probing entry {k}")
        gflat[k] = (fp - fm) / (2 * h)
    return grad


def pca_project(X, k: int) -> np.ndarray:
    """Project mean-centred rows onto the top-k principal axes.

    Axes come from an eigendecomposition of the feature covariance; each
    axis is signed so that its largest-magnitude loading is positive.
    """
    X = as_mat(X)
    n, d = X.shape
    if k > d:
        raise ShapeError(f"cannot project {d} features onto {k} components")
    if n < 2:
        raise ShapeError("PCA needs at least two rows")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")[:k]
    axes = vecs[:, order]
    pivot = np.argmax(np.abs(axes), axis=0)
    signs = np.sign(axes[pivot, np.arange(k)])
    signs[signs == 0] = 1.0
    return Xc @ (axes * signs)


class Rng:
    """Seeded random stream (PCG64), identical on every platform.

    Gaussians use the Box-Muller transform of two uniforms:
    ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self.position = 0

    def uniform(self, size=None):
        if size is None:
            self.position += 1
            return float(self._gen.random())
        out = self._gen.random(size)
        self.position += out.size
        return out

    def gaussian(self, size=None):
        shape = () if size is None else size
        u1 = self.uniform(shape if shape else None)
        u2 = self.uniform(shape if shape else None)
        z = np.sqrt(-2.0 * np.log1p(-np.asarray(u1))) * np.cos(2.0 * np.pi * np.asarray(u2))
        return float(z) if size is None else z

    def integers(self, high: int, size=None):
        """Uniform integers in [0, high), derived from the uniform stream."""
        u = self.uniform(size)
        return np.minimum((np.asarray(u) * high).astype(np.int64), high - 1) if size is not None \
            else min(int(u * high), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        # Fisher-Yates driven by the uniform stream
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice_distinct(self, n: int, k: int) -> np.ndarray:
        return self.permutation(n)[:k].copy()
