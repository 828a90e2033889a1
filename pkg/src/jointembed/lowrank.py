"""Adaptive low-rank compression of kernel matrices.

``biorthogonal_cholesky`` is the greedy diagonally pivoted Cholesky
factorisation ``K ~ L L^T`` that also tracks a basis ``B`` with
``B^T L = I``.  Column ``k`` of ``B`` is supported on the first ``k`` pivot
rows only, so ``B`` is stored compressed as the ``m x m`` upper-triangular
matrix ``U`` with ``U[i, :] = B[p_i, :]``.

``doubly_orthogonal`` turns a factor into the basis
``psi = k(., z_p) @ U @ V`` where ``L^T L = V diag(lam) V^T``.  That basis is
orthonormal in the RKHS and orthogonal in the empirical L2 inner product
of the sample, with squared norms ``lam / N``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._accel import njit, select
from .exceptions import DegenerateBasisError
from .kernels import as_points
from .numerics import sym_eigen

PIVOT_FLOOR = 1e-12
MAX_RANK_CAP = 2000


@njit(fastmath=True)
def _chol_step_numba(l, m, j, col, d, inv_sqrt_dj):
    # Memory bound: one pass over the first m columns of L per pivot.  The
    # reassociated dot product (fastmath) only changes rounding.
    n = l.shape[0]
    lj = l[j, :m].copy()
    err = 0.0
    for i in range(n):
        s = 0.0
        for k in range(m):
            s += l[i, k] * lj[k]
        s = (col[i] - s) * inv_sqrt_dj
        l[i, m] = s
        di = d[i] - s * s
        if di < 0.0:
            di = 0.0
        d[i] = di
        err += di
    return err


def _chol_step_numpy(l, m, j, col, d, inv_sqrt_dj):
    new = (col - l[:, :m] @ l[j, :m]) * inv_sqrt_dj
    l[:, m] = new
    d -= new * new
    np.maximum(d, 0.0, out=d)
    return float(d.sum())


_chol_step = select(_chol_step_numba, _chol_step_numpy)


@dataclass
class PivotedCholeskyFactor:
    l: np.ndarray
    pivots: np.ndarray
    residual_diag: np.ndarray
    trace_error: float
    status: str  # "tolerance" | "max_rank" | "exact_rank"
    u: np.ndarray | None = None
    err_history: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def rank(self) -> int:
        return self.l.shape[1]

    @property
    def b(self) -> np.ndarray | None:
        """Dense ``n x m`` biorthogonal matrix, expanded from the compressed rows."""
        if self.u is None:
            return None
        b = np.zeros_like(self.l)
        b[self.pivots] = self.u
        return b


def _factorize(k, pts, eps, max_rank, with_b):
    pts = as_points(pts)
    n = pts.shape[0]
    if not eps > 0:
        raise ValueError("eps must be positive")
    max_rank = min(n, MAX_RANK_CAP) if max_rank is None else int(max_rank)
    if not 1 <= max_rank <= n:
        raise ValueError(f"max_rank must lie in [1, {n}]")

    d = np.array(k.diag(pts), dtype=float)
    err = float(d.sum())
    cap = min(max_rank, 64)
    l = np.zeros((n, cap))
    u = np.zeros((cap, cap)) if with_b else None
    pivots = []
    history = [err]
    status = "tolerance"
    m = 0
    while err > eps:
        if m == max_rank:
            status = "max_rank"
            break
        j = int(np.argmax(d))  # first maximum: lowest index wins ties
        dj = d[j]
        if dj <= PIVOT_FLOOR:
            status = "exact_rank"
            break
        if m == cap:
            cap = min(max_rank, 2 * cap)
            l = np.concatenate([l, np.zeros((n, cap - m))], axis=1)
            if with_b:
                grown = np.zeros((cap, cap))
                grown[:m, :m] = u
                u = grown
        inv = 1.0 / np.sqrt(dj)
        if with_b:
            u[:m, m] = -(u[:m, :m] @ l[j, :m]) * inv
            u[m, m] = inv
        col = np.ascontiguousarray(k.column(pts, j), dtype=float)
        err = _chol_step(l, m, j, col, d, inv)
        d[j] = 0.0
        pivots.append(j)
        m += 1
        history.append(err)
    if m == 0:
        raise DegenerateBasisError(
            f"eps={eps:g} is not below the initial trace {err:g}; the basis would be empty"
        )
    return PivotedCholeskyFactor(
        l=np.ascontiguousarray(l[:, :m]),
        pivots=np.asarray(pivots, dtype=np.int64),
        residual_diag=d,
        trace_error=float(d.sum()),
        status=status,
        u=np.ascontiguousarray(u[:m, :m]) if with_b else None,
        err_history=np.asarray(history),
    )


def pivoted_cholesky(k, pts, eps, max_rank=None) -> PivotedCholeskyFactor:
    """Greedy pivoted Cholesky ``K ~ L L^T`` stopping once the trace error is at most ``eps``.

    Columns of ``K`` are requested from ``k`` one at a time.  A pivot at or
    below ``1e-12`` ends the loop early with ``status == "exact_rank"``.
    """
    return _factorize(k, pts, eps, max_rank, with_b=False)


def biorthogonal_cholesky(k, pts, eps, max_rank=None) -> PivotedCholeskyFactor:
    """Same factor as :func:`pivoted_cholesky` plus the biorthogonal basis (``B^T L = I``)."""
    return _factorize(k, pts, eps, max_rank, with_b=True)


@dataclass
class DoublyOrthogonalBasis:
    pivot_points: np.ndarray
    q: np.ndarray
    eigenvalues: np.ndarray
    n_atoms: int
    kernel: object
    l_factor: np.ndarray  # n x m Cholesky factor of the sample that built the basis
    rotation: np.ndarray  # eigenvectors V of L^T L
    trace_error: float = 0.0
    _train_values: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.q.shape[1]

    @property
    def l2_norms_sq(self) -> np.ndarray:
        return self.eigenvalues / self.n_atoms

    @property
    def train_values(self) -> np.ndarray:
        """Basis evaluated at the construction sample (``L V``, n x m), built on first use."""
        if self._train_values is None:
            self._train_values = self.l_factor @ self.rotation
        return self._train_values

    @property
    def train_mean(self) -> np.ndarray:
        return (self.l_factor.sum(axis=0) / self.n_atoms) @ self.rotation

    def __call__(self, z) -> np.ndarray:
        return basis_eval(self, self.kernel, z)


def doubly_orthogonal(f: PivotedCholeskyFactor, k, pts) -> DoublyOrthogonalBasis:
    if f.u is None:
        raise ValueError("factor has no biorthogonal basis; use biorthogonal_cholesky")
    pts = as_points(pts)
    eig = sym_eigen(f.l.T @ f.l)
    lam = eig.values
    if lam[-1] <= 1e-14 * lam[0]:
        raise DegenerateBasisError(
            "pivot block K(p, p) is numerically singular; use a larger eps"
        )
    return DoublyOrthogonalBasis(
        pivot_points=pts[f.pivots].copy(),
        q=f.u @ eig.vectors,
        eigenvalues=lam,
        n_atoms=pts.shape[0],
        kernel=k,
        l_factor=f.l,
        rotation=eig.vectors,
        trace_error=f.trace_error,
    )


def basis_eval(b: DoublyOrthogonalBasis, k, z) -> np.ndarray:
    """Basis values ``[k(z, z_p1), ..., k(z, z_pm)] @ q``; a batch of points gives one row each."""
    z = np.asarray(z, dtype=float)
    d = b.pivot_points.shape[1]
    single = z.ndim <= 1 and z.size == d
    pts = z.reshape(1, d) if single else as_points(z)
    if pts.shape[1] != d:
        raise ValueError(f"point dimension {pts.shape[1]} does not match basis dimension {d}")
    vals = k.cross(pts, b.pivot_points) @ b.q
    return vals[0] if single else vals


@dataclass
class TensorBasis:
    basis_x: DoublyOrthogonalBasis
    basis_y: DoublyOrthogonalBasis

    @property
    def m_x(self) -> int:
        return self.basis_x.dim

    @property
    def m_y(self) -> int:
        return self.basis_y.dim

    @property
    def dim(self) -> int:
        return self.m_x * self.m_y

    def eval(self, x, y) -> np.ndarray:
        """``psi_X(x) kron psi_Y(y)``, matching the column-major ``vec(H)`` layout."""
        return np.kron(self.basis_x(x), self.basis_y(y))


def marginal_basis(pts, k, eps, max_rank=None) -> DoublyOrthogonalBasis:
    f = biorthogonal_cholesky(k, pts, eps, max_rank)
    return doubly_orthogonal(f, k, pts)


def tensor_lowrank(dsx, kx, dsy, ky, eps, max_rank=None) -> TensorBasis:
    dsx, dsy = as_points(dsx), as_points(dsy)
    if dsx.shape[0] != dsy.shape[0]:
        raise ValueError("paired samples must have the same number of rows")
    return TensorBasis(marginal_basis(dsx, kx, eps, max_rank), marginal_basis(dsy, ky, eps, max_rank))
