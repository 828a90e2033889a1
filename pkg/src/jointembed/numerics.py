"""Dense numerical primitives used throughout the package.

The symmetric eigensolver is a cyclic Jacobi method with the relative
off-diagonal test of Demmel and Veselic, which keeps small eigenvalues of
graded positive semidefinite matrices (such as ``L.T @ L``) accurate to a
few ulps relative to themselves, not just relative to the norm.  Large
matrices go to LAPACK instead (see :func:`sym_eigen`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from ._accel import njit, select
from .exceptions import ConvergenceError, NotPositiveDefiniteError, SingularMatrixError

JACOBI_TOL = 1e-15
JACOBI_MAX_SWEEPS = 60
JACOBI_MAX_DIM = 256  # above this, "auto" hands the problem to LAPACK


@dataclass(frozen=True)
class EigenDecomposition:
    values: np.ndarray  # descending
    vectors: np.ndarray  # columns


@njit
def _jacobi_numba(a, tol, max_sweeps):
    # rotations act on rows only; the symmetric column is mirrored afterwards,
    # and the eigenvectors are accumulated transposed so every sweep is row-contiguous
    a = a.copy()
    n = a.shape[0]
    vt = np.eye(n)
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                if abs(apq) <= tol * np.sqrt(abs(app * aqq)):
                    continue
                rotated = True
                theta = (aqq - app) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + np.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    if k != p and k != q:
                        a[k, p] = a[p, k]
                        a[k, q] = a[q, k]
                for k in range(n):
                    vp = vt[p, k]
                    vq = vt[q, k]
                    vt[p, k] = c * vp - s * vq
                    vt[q, k] = s * vp + c * vq
        if not rotated:
            return np.diag(a).copy(), vt.T.copy(), True
    return np.diag(a).copy(), vt.T.copy(), False


def _jacobi_numpy(a, tol, max_sweeps):
    a = np.array(a, dtype=float, copy=True)
    n = a.shape[0]
    vt = np.eye(n)
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app, aqq = a[p, p], a[q, q]
                if abs(apq) <= tol * np.sqrt(abs(app * aqq)):
                    continue
                rotated = True
                theta = (aqq - app) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rowp, rowq = a[p].copy(), a[q]
                a[p] = c * rowp - s * rowq
                a[q] = s * rowp + c * rowq
                a[p, p], a[q, q] = app - t * apq, aqq + t * apq
                a[p, q] = a[q, p] = 0.0
                a[:, p], a[:, q] = a[p], a[q]
                vp, vq = vt[p].copy(), vt[q]
                vt[p] = c * vp - s * vq
                vt[q] = s * vp + c * vq
        if not rotated:
            return np.diag(a).copy(), vt.T.copy(), True
    return np.diag(a).copy(), vt.T.copy(), False


_jacobi = select(_jacobi_numba, _jacobi_numpy)


def sym_eigen(a, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS, method="auto") -> EigenDecomposition:
    """Eigendecomposition of a symmetric matrix.

    ``method`` is ``"jacobi"`` (cyclic Jacobi rotations), ``"lapack"``
    (``numpy.linalg.eigh``) or ``"auto"``, which uses Jacobi up to
    ``JACOBI_MAX_DIM`` rows and LAPACK beyond, where Jacobi's larger constant
    starts to dominate the basis construction.

    Eigenvalues are returned in descending order.  Each eigenvector is
    signed so that its largest-magnitude entry is positive, which makes the
    output deterministic for simple eigenvalues.

    Raises
    ------
    ConvergenceError
        If off-diagonal mass remains after ``max_sweeps`` sweeps.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise ValueError(f"expected a non-empty square matrix, got shape {a.shape}")
    scale = np.max(np.abs(a))
    if not np.isfinite(scale):
        raise ValueError("matrix has non-finite entries")
    if not np.allclose(a, a.T, rtol=1e-12, atol=1e-12 * scale):
        raise ValueError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    if method == "auto":
        method = "jacobi" if a.shape[0] <= JACOBI_MAX_DIM else "lapack"
    if method == "lapack":
        values, vectors = np.linalg.eigh(a)
        ok = True
    elif method == "jacobi":
        values, vectors, ok = _jacobi(np.ascontiguousarray(a), tol, max_sweeps)
    else:
        raise ValueError(f"unknown method {method!r}")
    if not ok:
        raise ConvergenceError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")
    order = np.argsort(-values, kind="stable")
    values = values[order]
    vectors = vectors[:, order]
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return EigenDecomposition(values, vectors * signs)


@njit
def _cholesky_numba(a):
    n = a.shape[0]
    l = np.zeros((n, n))
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= l[j, k] * l[j, k]
        if not s > 0.0:
            return l, j
        l[j, j] = np.sqrt(s)
        for i in range(j + 1, n):
            t = a[i, j]
            for k in range(j):
                t -= l[i, k] * l[j, k]
            l[i, j] = t / l[j, j]
    return l, -1


def _cholesky_numpy(a):
    n = a.shape[0]
    l = np.zeros((n, n))
    for j in range(n):
        s = a[j, j] - l[j, :j] @ l[j, :j]
        if not s > 0.0:
            return l, j
        l[j, j] = np.sqrt(s)
        l[j + 1 :, j] = (a[j + 1 :, j] - l[j + 1 :, :j] @ l[j, :j]) / l[j, j]
    return l, -1


_cholesky = select(_cholesky_numba, _cholesky_numpy)


def cholesky_dense(a) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == a`` for symmetric positive definite ``a``."""
    a = np.ascontiguousarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    l, bad = _cholesky(a)
    if bad >= 0:
        raise NotPositiveDefiniteError(f"matrix is not positive definite (pivot {bad})")
    return l


def triangular_solve(l, b, transposed=False) -> np.ndarray:
    """Solve ``l @ x = b`` (or ``l.T @ x = b``) for lower-triangular ``l``."""
    l = np.asarray(l, dtype=float)
    b = np.asarray(b, dtype=float)
    n = l.shape[0]
    if l.shape != (n, n) or b.shape[0] != n:
        raise ValueError("shape mismatch in triangular_solve")
    diag = np.diag(l)
    if np.any(diag == 0.0):
        raise SingularMatrixError("triangular matrix has a zero diagonal entry")
    x = np.array(b, dtype=float, copy=True)
    vector = x.ndim == 1
    if vector:
        x = x[:, None]
    if not transposed:
        for i in range(n):
            x[i] = (x[i] - l[i, :i] @ x[:i]) / diag[i]
    else:
        for i in range(n - 1, -1, -1):
            x[i] = (x[i] - l[i + 1 :, i] @ x[i + 1 :]) / diag[i]
    return x[:, 0] if vector else x


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator; passes existing generators through."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return np.random.Generator(np.random.Philox(seed))


def psd_factor(cov, neg_tol=1e-10) -> np.ndarray:
    """Matrix ``F`` with ``F @ F.T == cov``; Cholesky first, clipped eigen-factor for singular PSD input."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    try:
        return cholesky_dense(cov)
    except NotPositiveDefiniteError:
        pass
    eig = sym_eigen(cov)
    scale = max(1.0, float(np.max(np.abs(eig.values))))
    if eig.values[-1] < -neg_tol * scale:
        raise NotPositiveDefiniteError(
            f"covariance is not positive semidefinite (eigenvalue {eig.values[-1]:.3e})"
        )
    return eig.vectors * np.sqrt(np.clip(eig.values, 0.0, None))


def sample_mvn(mean, cov, n, seed) -> np.ndarray:
    """Draw ``n`` rows from N(mean, cov); deterministic for a given seed."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    factor = psd_factor(cov)
    if factor.shape[0] != mean.shape[0]:
        raise ValueError("mean and covariance dimensions differ")
    z = make_rng(seed).standard_normal((int(n), mean.shape[0]))
    return mean + z @ factor.T


def std_normal_cdf(t):
    """Standard normal CDF, accurate to double precision in the tails."""
    out = ndtr(np.asarray(t, dtype=float))
    return float(out) if out.ndim == 0 else out


def vec_index(row, col, m_y, m_x=None) -> int:
    """Column-major flat index of entry ``(row, col)`` of an ``m_y x m_x`` matrix."""
    if not 0 <= row < m_y:
        raise IndexError(f"row {row} out of range for m_y={m_y}")
    if col < 0 or (m_x is not None and col >= m_x):
        raise IndexError(f"col {col} out of range for m_x={m_x}")
    return col * m_y + row
