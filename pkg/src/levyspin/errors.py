"""Exception hierarchy shared by all modules."""


class LevySpinError(Exception):
    """Base class for every error raised by the toolkit."""


class ConditionViolated(LevySpinError):
    """The model fails the integrability condition on 1/|psi| at infinity."""


class CutoffTooSmall(LevySpinError):
    """The quadrature cutoff leaves a tail larger than the tolerance."""


class UnknownName(LevySpinError, KeyError):
    """A builtin name was not recognised."""

    def __str__(self):
        return Exception.__str__(self)


class NotIntegrable(LevySpinError):
    """An L1 quantity was requested for a mass that is not integrable."""


class UnsupportedModel(LevySpinError):
    """The model lacks the structure an operation needs."""


class ConvergenceFailure(LevySpinError):
    """An iterative eigensolver or fit did not converge."""


class DegenerateGap(LevySpinError):
    """The two leading Nystrom eigenvalues are numerically equal."""


class OutOfGrid(LevySpinError):
    """A query point lies outside the discretisation grid."""


class RowMassError(LevySpinError):
    """A transition-kernel row sum drifted too far from one."""


class CapExceeded(LevySpinError):
    """A simulated lifetime exceeded the configured time cap."""


class InsufficientTail(LevySpinError):
    """Too few surviving paths to estimate the survival tail."""


class AcceptanceOutOfRange(LevySpinError):
    """Metropolis acceptance after tuning is outside the usable band."""


class ConfigError(LevySpinError):
    """Malformed or invalid run configuration."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
