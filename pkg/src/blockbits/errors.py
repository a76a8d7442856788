"""Exception types raised across the package."""


class BlockBitsError(Exception):
    """Base class for all library errors."""


class ShapeError(BlockBitsError, ValueError):
    pass


class ContractError(BlockBitsError, ValueError):
    pass


class NumericError(BlockBitsError, ArithmeticError):
    pass


class SpecError(BlockBitsError, ValueError):
    pass


class SizeError(BlockBitsError, ValueError):
    pass


class InputError(BlockBitsError, ValueError):
    pass


class TrainingError(BlockBitsError, RuntimeError):
    pass


class ConfigError(BlockBitsError, ValueError):
    """Invalid configuration; ``key`` names the offending entry when known."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class PermutationError(BlockBitsError, ValueError):
    pass


class FormatError(BlockBitsError, ValueError):
    """Malformed or truncated binary container."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ReportError(BlockBitsError, RuntimeError):
    pass


class StageError(BlockBitsError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
