from typing import Any


class MicrolinkError(Exception):
    """Base class for all errors raised by microlink."""


class DomainError(MicrolinkError, ValueError):
    """Invalid argument shapes or empty inputs."""


class ConfigError(MicrolinkError):
    """The run configuration is missing, malformed or violates a model invariant."""


class DataError(MicrolinkError):
    """Household data is unusable."""


class DataRangeError(DataError):
    """A requested time window is not covered by the data."""


class DataParseError(DataError):
    """A data file row could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        """Attach the offending line number to the message."""
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class DataContinuityError(DataError):
    """A household series has a gap or a duplicated step."""


class SolverError(MicrolinkError):
    """An optimisation routine failed; `last_iterate` holds the last consistent state if any."""

    def __init__(self, message: str, last_iterate: Any = None):
        """Store the message and the last consistent iterate."""
        super().__init__(message)
        self.last_iterate = last_iterate


class QPSolveError(SolverError):
    """The batched QP solver hit its iteration cap."""


class InfeasibleControlError(SolverError):
    """A control about to be applied violates the battery constraints."""


class FittingError(MicrolinkError):
    """The RBF interpolation system is singular."""


class TrainingError(MicrolinkError):
    """Neural network training produced a non-finite loss."""

    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None):
        """Store the message and the training diagnostics."""
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ModelFormatError(MicrolinkError):
    """A surrogate model file is malformed or does not match the expected dimensions."""
