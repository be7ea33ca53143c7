"""Exception taxonomy for repulse.

Every error raised by the library derives from ``RepulseError``. Input validation
errors also derive from ``ValueError``. The CLI maps classes to exit codes via
``exit_code_for``.
"""

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4


class RepulseError(Exception):
    """Base class for all repulse errors."""


class SpecError(RepulseError, ValueError):
    """Inconsistent network or particle specification."""


class DimensionMismatch(RepulseError, ValueError):
    """Array shapes do not match the network specification."""

    def __init__(self, message: str, layer: int | None = None):
        self.layer = layer
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)


class KernelError(RepulseError, ValueError):
    """Invalid kernel configuration or bandwidth."""


class LabelOutOfRange(RepulseError, ValueError):
    """A class label lies outside [0, K)."""


class EmptyPool(RepulseError, ValueError):
    """A repulsion source or dataset has no rows to draw from."""


class PoolExhausted(RepulseError, ValueError):
    """Active learning would acquire more samples than the pool holds."""


class PatchError(RepulseError, ValueError):
    """Patch size incompatible with the image."""


class NumericError(RepulseError, ArithmeticError):
    """Training produced non-finite parameters."""


class ConfigError(RepulseError, ValueError):
    """Malformed or inconsistent experiment configuration."""


class CheckpointError(RepulseError, ValueError):
    """Checkpoint file cannot be read."""


class BadMagic(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class VersionMismatch(CheckpointError):
    """Checkpoint format version is not supported."""


class TruncatedCheckpoint(CheckpointError):
    """Checkpoint file ends before all declared data."""


class SpecDigestMismatch(CheckpointError):
    """Stored spec digest does not match the stored spec descriptors."""


class DatasetFormatError(RepulseError, ValueError):
    """Dataset file cannot be parsed."""


class MalformedHeader(DatasetFormatError):
    """CSV header or binary preamble is invalid."""


class RowLengthMismatch(DatasetFormatError):
    """A CSV row has the wrong number of fields."""

    def __init__(self, line: int, expected: int, got: int):
        self.line = line
        super().__init__(f"line {line}: expected {expected} fields, got {got}")


class NonFiniteValue(DatasetFormatError):
    """Dataset contains NaN or infinity."""


class InvalidLabel(DatasetFormatError):
    """Classification label is not a non-negative integer."""


def exit_code_for(error: BaseException) -> int:
    """
    Map an exception to the CLI exit code.

    Args:
        error: The exception that aborted a command.

    Returns:
        3 for configuration and file-format errors, 4 for everything numeric.
    """
    if isinstance(error, ConfigError | CheckpointError | DatasetFormatError):
        return EXIT_CONFIG
    return EXIT_NUMERIC
