"""Gaussian kernels on marginal spaces and their tensor product.

Kernels only ever hand out single columns, diagonals, or small cross
blocks; the full ``n x n`` Gram matrix is never formed by the estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._accel import njit, select


def as_points(x) -> np.ndarray:
    """Coerce to a C-contiguous float ``(n, d)`` array; 1-d input is a column of scalars."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x[:, None]
    elif x.ndim != 2:
        raise ValueError(f"points must be at most 2-d, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("points contain non-finite entries")
    return np.ascontiguousarray(x)


@njit
def _gauss_column_numba(pts, j, scale):
    n, d = pts.shape
    out = np.empty(n)
    for i in range(n):
        s = 0.0
        for k in range(d):
            diff = pts[i, k] - pts[j, k]
            s += diff * diff
        out[i] = np.exp(-s * scale)
    return out


def _gauss_column_numpy(pts, j, scale):
    diff = pts - pts[j]
    return np.exp(-np.einsum("ij,ij->i", diff, diff) * scale)


@njit
def _gauss_cross_numba(a, b, scale):
    na, d = a.shape
    nb = b.shape[0]
    out = np.empty((na, nb))
    for i in range(na):
        for j in range(nb):
            s = 0.0
            for k in range(d):
                diff = a[i, k] - b[j, k]
                s += diff * diff
            out[i, j] = np.exp(-s * scale)
    return out


def _gauss_cross_numpy(a, b, scale):
    out = np.empty((a.shape[0], b.shape[0]))
    step = max(1, 2_000_000 // max(1, b.shape[0] * a.shape[1]))
    for lo in range(0, a.shape[0], step):
        diff = a[lo : lo + step, None, :] - b[None, :, :]
        out[lo : lo + step] = np.exp(-np.einsum("ijk,ijk->ij", diff, diff) * scale)
    return out


_gauss_column = select(_gauss_column_numba, _gauss_column_numpy)
_gauss_cross = select(_gauss_cross_numba, _gauss_cross_numpy)


@dataclass(frozen=True)
class GaussianKernel:
    """``k(x, x') = exp(-|x - x'|^2 / (2 sigma^2))``."""

    sigma: float
    unit_diagonal = True

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def _scale(self):
        return 0.5 / (self.sigma * self.sigma)

    def eval(self, x, xp) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        xp = np.atleast_1d(np.asarray(xp, dtype=float))
        if x.shape != xp.shape or x.ndim != 1:
            raise ValueError(f"dimension mismatch: {x.shape} vs {xp.shape}")
        diff = x - xp
        return float(np.exp(-(diff @ diff) * self._scale))

    def column(self, pts, j) -> np.ndarray:
        pts = as_points(pts)
        if not 0 <= j < pts.shape[0]:
            raise IndexError(f"column {j} out of range for {pts.shape[0]} points")
        return _gauss_column(pts, int(j), self._scale)

    def diag(self, pts) -> np.ndarray:
        return np.ones(as_points(pts).shape[0])

    def cross(self, a, b) -> np.ndarray:
        """Block ``[k(a_i, b_j)]``; meant for small ``b`` (pivot sets)."""
        a, b = as_points(a), as_points(b)
        if a.shape[1] != b.shape[1]:
            raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
        return _gauss_cross(a, b, self._scale)


@dataclass(frozen=True)
class TensorKernel:
    """Product kernel ``k((x, y), (x', y')) = kx(x, x') * ky(y, y')``."""

    kx: GaussianKernel
    ky: GaussianKernel

    @property
    def unit_diagonal(self):
        return self.kx.unit_diagonal and self.ky.unit_diagonal

    def eval(self, z, zp) -> float:
        (x, y), (xp, yp) = z, zp
        return self.kx.eval(x, xp) * self.ky.eval(y, yp)


def gauss_eval(k: GaussianKernel, x, xp) -> float:
    return k.eval(x, xp)


def kernel_column(k, pts, j) -> np.ndarray:
    return k.column(pts, j)


def kernel_diag(k, pts) -> np.ndarray:
    return k.diag(pts)


def tensor_eval(k: TensorKernel, z, zp) -> float:
    return k.eval(z, zp)
