"""Exception types raised across the package."""


class CMLFError(Exception):
    """Base class for all package errors."""


class ContractViolation(CMLFError, ValueError):
    """An input broke an operation's preconditions (shape, finiteness, pairing)."""


class ConfigError(CMLFError, ValueError):
    pass


class DegeneratePropertyError(CMLFError, ValueError):
    """A normalizer or property has zero spread, so a ratio metric is undefined."""


class InsufficientDataError(CMLFError, ValueError):
    pass


class StratificationError(CMLFError, ValueError):
    pass


class DatasetLoadError(CMLFError, OSError):
    pass


class CheckpointError(CMLFError, OSError):
    pass


class TrainingDivergence(CMLFError, RuntimeError):
    """Loss became non-finite. ``term`` names the first offending loss component."""

    def __init__(self, message, term=None, epoch=None):
        super().__init__(message)
        self.term = term
        self.epoch = epoch
