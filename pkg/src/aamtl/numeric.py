"""Dense linear-algebra kernels: PCA, rank-pruning orthonormalization, projection.

A basis is a plain ``(dim, k)`` float array whose columns are orthonormal.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateInputError, DimensionError

PCA_RANK_TOL = 1e-12
QR_RANK_TOL = 1e-10


@dataclass(frozen=True)
class PcaResult:
    mean: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]


def empty_basis(dim: int) -> np.ndarray:
    return np.zeros((dim, 0))


def fix_signs(basis: np.ndarray) -> np.ndarray:
    """Flip each column so that its largest-magnitude entry is positive."""
    basis = np.array(basis, dtype=float, copy=True)
    if basis.shape[1] == 0:
        return basis
    idx = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[idx, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs


def pca(samples, variance_fraction: float = 1.0) -> PcaResult:
    """Principal components of the columns of ``samples``.

    Parameters
    ----------
    samples : array of shape (dim, N)
        One sample per column.
    variance_fraction : float in (0, 1]
        Keep the smallest number of components whose eigenvalues sum to at
        least this fraction of the total variance.

    Returns
    -------
    PcaResult
        Eigenvalues use the ``N - 1`` divisor and are sorted nonincreasing.
    """
    X = np.asarray(samples, dtype=float)
    if X.ndim != 2:
        raise DimensionError(f"samples must be 2-D (dim, N), got shape {X.shape}")
    dim, n = X.shape
    if n < 2:
        raise DegenerateInputError(f"PCA needs at least 2 samples, got {n}")
    if dim < 1:
        raise DimensionError("samples have zero dimension")
    if not 0.0 < variance_fraction <= 1.0:
        raise ValueError(f"variance_fraction must lie in (0, 1], got {variance_fraction}")

    mean = X.mean(axis=1)
    Xc = X - mean[:, None]
    # thin SVD costs O(dim * N^2) like the Gram route but keeps full accuracy
    # on the small directions
    U, s, _ = np.linalg.svd(Xc, full_matrices=False)
    eig = s**2 / (n - 1)

    scale2 = float(np.mean(X**2)) * dim / (n - 1)
    floor = max(PCA_RANK_TOL * (eig[0] if eig.size else 0.0), 1e-24 * scale2)
    keep = eig > floor
    eig = eig[keep]
    U = U[:, keep]
    if eig.size:
        cum = np.cumsum(eig)
        target = variance_fraction * cum[-1] * (1.0 - 1e-12)
        k = int(np.searchsorted(cum, target) + 1)
        k = min(k, eig.size)
        eig = eig[:k]
        U = U[:, :k]
    return PcaResult(mean=mean, basis=fix_signs(U), eigenvalues=eig)


def orthonormalize(columns, tol: float = QR_RANK_TOL) -> np.ndarray:
    """Orthonormal basis for the column space of ``columns``, in input order.

    Columns are processed left to right with twice-repeated Gram-Schmidt, so
    leading columns that are already orthonormal come back unchanged. A column
    whose residual norm falls below ``tol`` times the largest input column
    norm is dropped.
    """
    A = np.asarray(columns, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    dim, m = A.shape
    if m == 0:
        return empty_basis(dim)
    norms = np.linalg.norm(A, axis=0)
    ref = norms.max()
    if ref == 0.0:
        return empty_basis(dim)
    Q = np.empty((dim, m))
    k = 0
    for j in range(m):
        v = A[:, j].copy()
        for _ in range(2):
            if k:
                v -= Q[:, :k] @ (Q[:, :k].T @ v)
        r = np.linalg.norm(v)
        if r < tol * ref:
            continue
        Q[:, k] = v / r
        k += 1
    return Q[:, :k].copy()


def _check(basis, mean, n):
    basis = np.asarray(basis, dtype=float)
    mean = np.asarray(mean, dtype=float)
    if basis.ndim != 2 or mean.ndim != 1 or basis.shape[0] != mean.shape[0]:
        raise DimensionError(
            f"basis {basis.shape} and mean {mean.shape} do not agree")
    if n != basis.shape[0]:
        raise DimensionError(f"vector of length {n} does not match dimension {basis.shape[0]}")
    return basis, mean


def project(basis, mean, sample) -> np.ndarray:
    """Coefficients of ``sample - mean`` on the basis columns."""
    sample = np.asarray(sample, dtype=float)
    basis, mean = _check(basis, mean, sample.shape[0])
    return basis.T @ (sample - mean)


def reconstruct(basis, mean, coeffs) -> np.ndarray:
    """``mean + basis @ coeffs``."""
    basis = np.asarray(basis, dtype=float)
    mean = np.asarray(mean, dtype=float)
    coeffs = np.asarray(coeffs, dtype=float)
    basis, mean = _check(basis, mean, mean.shape[0])
    if coeffs.shape != (basis.shape[1],):
        raise DimensionError(
            f"expected {basis.shape[1]} coefficients, got shape {coeffs.shape}")
    return mean + basis @ coeffs


def is_orthonormal(basis, tol: float = 1e-10) -> bool:
    basis = np.asarray(basis, dtype=float)
    gram = basis.T @ basis
    return bool(np.all(np.abs(gram - np.eye(basis.shape[1])) <= tol))


def span_distance(a, b) -> float:
    """Largest sine of the principal angles between two column spaces.

    Both inputs must be orthonormal. Spaces of different dimension are
    compared in both directions; the result is 1.0 when one contains a
    direction orthogonal to the other.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[1] == 0 and b.shape[1] == 0:
        return 0.0
    ra = a - b @ (b.T @ a)
    rb = b - a @ (a.T @ b)
    da = np.linalg.norm(ra, axis=0).max() if a.shape[1] else 0.0
    db = np.linalg.norm(rb, axis=0).max() if b.shape[1] else 0.0
    return float(max(da, db))
