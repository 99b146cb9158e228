"""Custom exception hierarchy for Covfilt."""


class CovfiltError(Exception):
    """Base exception for all Covfilt errors."""


class ConfigError(CovfiltError):
    """Configuration-related errors."""


class ShapeError(CovfiltError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(CovfiltError):
    """A value that must be finite contains NaN or infinity."""


class TapeError(CovfiltError):
    """Misuse of an autodiff tape (mixed tapes, non-scalar root, repeated backward)."""


class NotPositiveDefiniteError(CovfiltError):
    """A matrix required to be positive definite failed Cholesky factorization."""

    def __init__(self, message: str, *, step: int | None = None) -> None:
        super().__init__(message)
        self.step = step


class AsymmetricMatrixError(CovfiltError):
    """A matrix required to be symmetric is too far from symmetric."""


class SubsetConditionError(CovfiltError):
    """A state-index subset cannot supervise every measurement row."""


class ModelFileError(CovfiltError):
    """Model file could not be read, parsed or written."""


class SchemaVersionError(ModelFileError):
    """Model file was written with an unsupported schema version."""


class DatasetFormatError(CovfiltError):
    """Dataset file is malformed."""

    def __init__(self, message: str, *, line: int | None = None) -> None:
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class TrainingDivergedError(CovfiltError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, *, parameter: str | None = None) -> None:
        super().__init__(message)
        self.parameter = parameter


class ReportWriteError(CovfiltError):
    """Report file could not be written."""


class MissingArtifactError(CovfiltError):
    """A dataset or model the command depends on does not exist."""
