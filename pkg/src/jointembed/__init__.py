"""Conditional distribution embeddings with low-rank kernel bases.

The estimator fits a density ratio ``g(x, y)`` of a joint sample against
the product of its marginals in a doubly orthogonal tensor basis built by
pivoted Cholesky.  Linear constraints make every conditional law integrate
to one and certify nonnegativity.
"""

from .estimator import (
    JointDensityModel,
    KlrModel,
    PairedSample,
    TraditionalModel,
    compute_alpha,
    conditional_expectation,
    density_eval,
    fit,
    fit_from_basis,
    klr_fit,
    klr_predict,
    normalization_rows,
    positivity_bounds,
    quadratic_diagonal,
    traditional_conditional_expectation,
    traditional_fit,
)
from .exceptions import (
    ConfigError,
    ConvergenceError,
    DegenerateBasisError,
    JointEmbedError,
    NotPositiveDefiniteError,
    SingularMatrixError,
)
from .kernels import GaussianKernel, TensorKernel
from .lowrank import (
    DoublyOrthogonalBasis,
    PivotedCholeskyFactor,
    TensorBasis,
    biorthogonal_cholesky,
    doubly_orthogonal,
    marginal_basis,
    pivoted_cholesky,
    tensor_lowrank,
)
from .qpsolver import KroneckerRows, QpSolution, QuadraticProgram, solve, solve_equality_only

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ConvergenceError", "DegenerateBasisError", "DoublyOrthogonalBasis",
    "GaussianKernel", "JointDensityModel", "JointEmbedError", "KlrModel", "KroneckerRows",
    "NotPositiveDefiniteError", "PairedSample", "PivotedCholeskyFactor", "QpSolution",
    "QuadraticProgram", "SingularMatrixError", "TensorBasis", "TensorKernel", "TraditionalModel",
    "biorthogonal_cholesky", "compute_alpha", "conditional_expectation", "density_eval",
    "doubly_orthogonal", "fit", "fit_from_basis", "klr_fit", "klr_predict", "marginal_basis",
    "normalization_rows", "pivoted_cholesky", "positivity_bounds", "quadratic_diagonal", "solve",
    "solve_equality_only", "tensor_lowrank", "traditional_conditional_expectation", "traditional_fit",
]
