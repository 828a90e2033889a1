"""Density-ratio embeddings of a joint law and the two baseline estimators.

The fitted object is ``g(x, y) = prior + psi_Y(y)^T H psi_X(x)``, a
Radon-Nikodym derivative of the joint law with respect to the product of
its marginals, so that ``E[f(Y) | X = x]`` is ``(1/n) sum_j f(y_j) g(x, y_j)``.
Coefficients live in the doubly orthogonal tensor basis, where the
quadratic part of the objective is diagonal.

Three variants share the objective ``alpha @ h + 0.5 * h @ ((D + lam) * h)``:

``unconstrained``
    closed form ``h = -alpha / (D + lam)``;
``normalized``
    adds the linear rows that make every conditional integrate to one;
``constrained``
    additionally imposes the sign-split positivity certificate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .exceptions import ConvergenceError, JointEmbedError, NotPositiveDefiniteError, SingularMatrixError
from .kernels import as_points
from .lowrank import TensorBasis, tensor_lowrank
from .qpsolver import KroneckerRows, QpSolution, QuadraticProgram, solve, solve_equality_only

VARIANTS = ("constrained", "normalized", "unconstrained")


@dataclass(frozen=True)
class PairedSample:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x, y = as_points(self.x), as_points(self.y)
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"x has {x.shape[0]} rows but y has {y.shape[0]}")
        if x.shape[0] == 0:
            raise ValueError("empty sample")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]


def _built_from(b, pts) -> bool:
    return b.n_atoms == pts.shape[0]


def _sample_values(basis: TensorBasis, s: PairedSample):
    """Basis values at the sample; reuses the construction values when sizes agree."""
    bx, by = basis.basis_x, basis.basis_y
    px = bx.train_values if _built_from(bx, s.x) else bx(s.x)
    py = by.train_values if _built_from(by, s.y) else by(s.y)
    return px, py


def _sample_means(basis: TensorBasis, s: PairedSample):
    bx, by = basis.basis_x, basis.basis_y
    r_x = bx.train_mean if _built_from(bx, s.x) else bx(s.x).mean(axis=0)
    r_y = by.train_mean if _built_from(by, s.y) else by(s.y).mean(axis=0)
    return r_x, r_y


def compute_alpha(basis: TensorBasis, s: PairedSample) -> np.ndarray:
    """Product-measure mean minus joint mean of every tensor basis function, as ``vec``."""
    bx, by = basis.basis_x, basis.basis_y
    if _built_from(bx, s.x) and _built_from(by, s.y):
        # the joint moment only needs the small cross Gram L_X^T L_Y
        joint = bx.rotation.T @ (bx.l_factor.T @ by.l_factor) @ by.rotation / s.n
        r_x, r_y = bx.train_mean, by.train_mean
    else:
        px, py = _sample_values(basis, s)
        joint = (px.T @ py) / s.n
        r_x, r_y = px.mean(axis=0), py.mean(axis=0)
    # m_x x m_y layout is the row-major view of the column-major m_y x m_x matrix
    return (np.outer(r_x, r_y) - joint).ravel()


def quadratic_diagonal(basis: TensorBasis, lam: float) -> np.ndarray:
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return np.outer(basis.basis_x.l2_norms_sq, basis.basis_y.l2_norms_sq).ravel() + lam


def normalization_rows(basis: TensorBasis, s: PairedSample) -> KroneckerRows:
    """Rows ``r_Y^T H = 0`` (``m_x`` of them) then ``H r_X = 0`` (``m_y``).

    Call ``.to_dense()`` on the result for the explicit matrix.
    """
    return KroneckerRows(*_sample_means(basis, s))


def positivity_bounds(basis: TensorBasis):
    """Per-function bounds ``a <= psi_i <= b``; exact for unit-diagonal kernels."""
    kx, ky = basis.basis_x.kernel, basis.basis_y.kernel
    if not (getattr(kx, "unit_diagonal", False) and getattr(ky, "unit_diagonal", False)):
        raise NotImplementedError("positivity bounds are only available for unit-diagonal kernels")
    return -np.ones(basis.dim), np.ones(basis.dim)


@dataclass
class JointDensityModel:
    basis: TensorBasis
    coeff_h: np.ndarray
    variant: str
    lam: float
    train_x: np.ndarray
    train_y: np.ndarray
    prior: float = 1.0
    solution: QpSolution | None = None
    _psi_y: np.ndarray | None = field(default=None, repr=False)

    @property
    def h_matrix(self) -> np.ndarray:
        """``H`` as an ``m_y x m_x`` array (``coeff_h`` is its column-major ``vec``)."""
        return self.coeff_h.reshape(self.basis.m_x, self.basis.m_y).T

    @property
    def psi_y(self) -> np.ndarray:
        if self._psi_y is None:
            by = self.basis.basis_y
            self._psi_y = by.train_values if _built_from(by, self.train_y) else by(self.train_y)
        return self._psi_y

    def density(self, x, y) -> np.ndarray:
        """``g`` at paired rows of ``x`` and ``y``."""
        px = self.basis.basis_x(as_points(x).reshape(-1, self.train_x.shape[1]))
        py = self.basis.basis_y(as_points(y).reshape(-1, self.train_y.shape[1]))
        if px.shape[0] != py.shape[0]:
            raise ValueError("x and y must have the same number of rows")
        return self.prior + np.einsum("ij,ij->i", py @ self.h_matrix, px)

    def conditional_expectation(self, f, x) -> np.ndarray:
        """``E[f(Y) | X = x]`` for each query row; ``f`` holds values at the training ``y``.

        ``f`` may be a vector or an ``n x k`` matrix of several functions;
        the result has one row per query point (a scalar or a ``k``-vector
        for a single point).
        """
        f = np.asarray(f, dtype=float)
        if f.shape[0] != self.psi_y.shape[0]:
            raise ValueError(f"f has {f.shape[0]} values but the model has {self.psi_y.shape[0]} training points")
        xq = np.asarray(x, dtype=float)
        d = self.train_x.shape[1]
        single = xq.size == d and xq.ndim <= 1
        px = self.basis.basis_x(xq.reshape(-1, d))
        n = self.psi_y.shape[0]
        proj = self.psi_y.T @ f / n  # m_y (x k)
        out = f.mean(axis=0) + px @ (self.h_matrix.T @ proj)
        return out[0] if single else out


def fit_from_basis(s: PairedSample, basis: TensorBasis, lam: float, variant: str,
                   prior: float = 1.0, tol: float = 1e-8, max_iter: int = 20000) -> JointDensityModel:
    """Fit one variant on a precomputed tensor basis (lets callers reuse bases across a grid)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    alpha = compute_alpha(basis, s)
    d = quadratic_diagonal(basis, lam)
    sol = None
    if variant == "unconstrained":
        h = -alpha / d
    elif variant == "normalized":
        sol = solve_equality_only(QuadraticProgram(alpha, d, normalization_rows(basis, s)))
        h = sol.h
    else:
        a, b = positivity_bounds(basis)
        p = QuadraticProgram(alpha, d, normalization_rows(basis, s), a, b, prior)
        sol = solve(p, tol=tol, max_iter=max_iter)
        if sol.status == "infeasible":
            raise JointEmbedError("positivity program reported infeasible although h = 0 is feasible")
        if sol.status != "optimal":
            raise ConvergenceError(
                f"QP stopped after {sol.iterations} iterations "
                f"(primal {sol.primal_residual:.2e}, dual {sol.dual_residual:.2e})",
                report=sol,
            )
        h = sol.h
    return JointDensityModel(basis, h, variant, float(lam), s.x, s.y, prior, sol)


def fit(s: PairedSample, kx, ky, eps: float, lam: float, variant: str, prior: float = 1.0,
        max_rank=None, tol: float = 1e-8, max_iter: int = 20000) -> JointDensityModel:
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    basis = tensor_lowrank(s.x, kx, s.y, ky, eps, max_rank)
    return fit_from_basis(s, basis, lam, variant, prior, tol, max_iter)


def density_eval(model: JointDensityModel, x, y) -> float:
    return float(model.density(x, y)[0])


def conditional_expectation(model: JointDensityModel, f_on_train_y, x):
    return model.conditional_expectation(f_on_train_y, x)


# --- traditional conditional mean embedding ---------------------------------------


@dataclass
class TraditionalModel:
    m_matrix: np.ndarray
    train_x: np.ndarray
    train_y: np.ndarray
    kernel_x: object
    lam: float

    def conditional_expectation(self, f, x):
        f = np.asarray(f, dtype=float)
        if f.shape[0] != self.m_matrix.shape[0]:
            raise ValueError("f must have one value per training point")
        xq = np.asarray(x, dtype=float)
        d = self.train_x.shape[1]
        single = xq.size == d and xq.ndim <= 1
        kq = self.kernel_x.cross(xq.reshape(-1, d), self.train_x)
        out = kq @ (self.m_matrix @ f)
        return out[0] if single else out


def traditional_fit(s: PairedSample, kx, lam: float) -> TraditionalModel:
    """``M = (K_X + lam I)^{-1}`` by a dense Cholesky factorisation."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    k = kx.cross(s.x, s.x)
    k[np.diag_indices_from(k)] += lam
    try:
        factor = cho_factor(k, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        cls = SingularMatrixError if lam == 0 else NotPositiveDefiniteError
        raise cls(f"K_X + {lam:g} I is not numerically positive definite") from exc
    diag = np.abs(np.diag(factor[0]))
    if (diag.max() / diag.min()) ** 2 > 1e15:
        raise SingularMatrixError(f"K_X + {lam:g} I is numerically singular")
    m = cho_solve(factor, np.eye(s.n), check_finite=False)
    return TraditionalModel(0.5 * (m + m.T), s.x, s.y, kx, float(lam))


def traditional_conditional_expectation(model: TraditionalModel, f_on_train_y, x):
    return model.conditional_expectation(f_on_train_y, x)


# --- kernel logistic regression -----------------------------------------------------


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class KlrModel:
    coeff: np.ndarray
    train_x: np.ndarray
    kernel_x: object
    lam: float
    iterations: int = 0
    grad_norm: float = 0.0

    def decision(self, x):
        xq = np.asarray(x, dtype=float)
        d = self.train_x.shape[1]
        return self.kernel_x.cross(xq.reshape(-1, d), self.train_x) @ self.coeff

    def predict(self, x):
        xq = np.asarray(x, dtype=float)
        p = _sigmoid(self.decision(xq))
        return float(p[0]) if xq.size == self.train_x.shape[1] and xq.ndim <= 1 else p


def klr_objective(coeff, k, labels, lam) -> float:
    f = k @ coeff
    return float(np.mean(np.logaddexp(0.0, -labels * f)) + lam * coeff @ f)


def klr_fit(x, labels, kx, lam: float, tol: float = 1e-6, max_iter: int = 100) -> KlrModel:
    """Damped Newton on ``mean log(1 + exp(-y K h)) + lam h^T K h``.

    Stops once the Euclidean norm of the gradient in ``h`` is at most ``tol``.
    """
    x = as_points(x)
    y = np.asarray(labels, dtype=float).ravel()
    if y.shape[0] != x.shape[0]:
        raise ValueError("one label per point required")
    if not np.all(np.abs(y) == 1.0):
        raise ValueError("labels must be -1 or +1")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    n = x.shape[0]
    k = kx.cross(x, x)
    h = np.zeros(n)
    f = np.zeros(n)
    obj = np.log(2.0)
    for it in range(1, max_iter + 1):
        r = -y * _sigmoid(-y * f) / n + 2.0 * lam * h
        grad = k @ r
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            return KlrModel(h, x, kx, float(lam), it - 1, gnorm)
        w = _sigmoid(f) * _sigmoid(-f)
        step = np.linalg.solve((w[:, None] * k) / n + 2.0 * lam * np.eye(n), -r)
        slope = float(grad @ step)
        t = 1.0
        while True:
            cand = h + t * step
            c_obj = klr_objective(cand, k, y, lam)
            if c_obj <= obj + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        h, obj, f = cand, c_obj, k @ cand
    r = -y * _sigmoid(-y * f) / n + 2.0 * lam * h
    gnorm = float(np.linalg.norm(k @ r))
    if gnorm <= tol:
        return KlrModel(h, x, kx, float(lam), max_iter, gnorm)
    raise ConvergenceError(f"Newton iteration stopped with gradient norm {gnorm:.2e}", report=gnorm)


def klr_predict(model: KlrModel, x):
    return model.predict(x)
