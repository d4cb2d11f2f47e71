"""Exception types shared across the toolkit."""


class HashPoisonError(Exception):
    """Base class for all toolkit errors."""


class InputError(HashPoisonError):
    """Caller supplied inconsistent or out-of-contract arguments."""


class FormatError(HashPoisonError):
    """On-disk data does not match the expected layout."""


class NumericError(HashPoisonError):
    """A computation produced NaN/Inf where finite values are required."""


class TrainingError(HashPoisonError):
    """Training diverged. Carries the epoch at which it happened."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DegenerateGradientError(HashPoisonError):
    """A gradient with (near-)zero norm where the attack needs a direction."""


class StageError(HashPoisonError):
    """A campaign stage failed. Carries the stage name for diagnostics."""

    def __init__(self, stage, message):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage
