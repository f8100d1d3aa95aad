"""Exception types raised across the package."""


class MvclipError(Exception):
    """Base class for all package errors."""


class DegenerateInputError(MvclipError, ValueError):
    """An input vector or image cannot be processed (e.g. zero norm)."""


class InsufficientBatchError(MvclipError, ValueError):
    """A contrastive loss needs at least two samples to form negatives."""


class EmptyPairSetError(MvclipError, ValueError):
    """A distinct-pair view set was requested with fewer than two views."""


class IntraTermUndefinedError(MvclipError, ValueError):
    """The intra-image term of IMM needs at least two views per sample."""


class NonFiniteError(MvclipError, ValueError):
    """NaN or infinity found where finite values are required."""


class InfeasibleSplitError(MvclipError, ValueError):
    """No group-disjoint split satisfies the requested test fraction."""


class RatioUndefinedError(MvclipError, ZeroDivisionError):
    """A generalisation ratio was requested against a zero random accuracy."""


class ConfigError(MvclipError, ValueError):
    """Bad configuration: unknown keys, wrong types or invalid values."""


class TrainingDivergedError(MvclipError, FloatingPointError):
    """Training produced a non-finite loss.

    Attributes:
        epoch: Zero-based epoch index at which the loss went non-finite.
        batch: Zero-based mini-batch index within that epoch.
        tau: Temperature in effect at that step.
    """

    def __init__(self, epoch: int, batch: int, tau: float):
        self.epoch = epoch
        self.batch = batch
        self.tau = tau
        super().__init__(
            f"non-finite loss at epoch={epoch} batch={batch} tau={tau!r}"
        )
