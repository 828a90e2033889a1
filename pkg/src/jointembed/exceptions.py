import numpy as np


class JointEmbedError(Exception):
    """Base class for errors raised by this package."""


class NotPositiveDefiniteError(JointEmbedError, np.linalg.LinAlgError):
    pass


class SingularMatrixError(JointEmbedError, np.linalg.LinAlgError):
    pass


class ConvergenceError(JointEmbedError):
    """An iterative method hit its iteration cap without converging."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class DegenerateBasisError(JointEmbedError):
    """Low-rank factorisation produced no usable basis function."""


class ConfigError(JointEmbedError):
    pass
