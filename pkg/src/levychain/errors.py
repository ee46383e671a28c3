"""Exception hierarchy shared by all modules."""


class LevyChainError(Exception):
    """Base class for library errors."""


class ConfigurationError(LevyChainError, ValueError):
    """A model, noise or experiment parameter violates a stated constraint."""


class NumericalError(LevyChainError, ArithmeticError):
    """A numerical procedure failed to reach its tolerance.

    Parameters
    ----------
    message : str
        Description of the failure.
    residual : float, optional
        The achieved residual or defect, when one is available.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DivergenceError(NumericalError):
    """A simulated or integrated state left the configured bound."""

    def __init__(self, message, path_id=None, residual=None):
        super().__init__(message, residual=residual)
        self.path_id = path_id


class QSupViolation(NumericalError):
    """The declared bound ``q_sup`` was exceeded at a proposed jump."""
