"""Exception hierarchy shared by all modules."""


class InckoopError(Exception):
    """Base class for every error raised by this package."""


class BadDims(InckoopError, ValueError):
    pass


class ShapeMismatch(InckoopError, ValueError):
    pass


class ConfigError(InckoopError, ValueError):
    pass


class NonFiniteState(InckoopError, FloatingPointError):
    """Plant integration produced NaN/Inf.

    ``partial`` carries whatever trajectory was built before the blow-up, when
    the error is raised from a rollout.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class NonFinitePrediction(InckoopError, FloatingPointError):
    pass


class RepoGenerationFailed(InckoopError, RuntimeError):
    pass


class DegenerateData(InckoopError, ValueError):
    pass


class EmptyDataset(InckoopError, ValueError):
    pass


class FormatError(InckoopError, ValueError):
    pass


class TrainFailed(InckoopError, RuntimeError):
    """Training diverged or collapsed; callers may retry with fewer epochs."""

    def __init__(self, message, epoch=None, losses=None):
        super().__init__(message)
        self.epoch = epoch
        self.losses = list(losses) if losses is not None else []


class TrainingCollapsed(InckoopError, RuntimeError):
    pass


class SingularGram(InckoopError, ArithmeticError):
    def __init__(self, message, min_eig=None, m=None):
        super().__init__(message)
        self.min_eig = min_eig
        self.m = m


class NotPD(InckoopError, ArithmeticError):
    pass


class DimTooLarge(InckoopError, ValueError):
    pass


class DegenerateFit(InckoopError, ValueError):
    pass


class IoError(InckoopError, OSError):
    """A required artifact could not be read or written."""
