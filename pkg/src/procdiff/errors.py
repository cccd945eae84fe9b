"""Exception hierarchy shared across the package."""


class ProcDiffError(Exception):
    """Base class for all package errors."""


class ValidationError(ProcDiffError, ValueError):
    """An argument violates a documented precondition."""


class ManifestParseError(ProcDiffError):
    def __init__(self, path, line_no, message):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class IntegrityError(ProcDiffError):
    """Duplicate or otherwise inconsistent records."""


class ReferentialError(ProcDiffError):
    """A record refers to something that does not exist."""


class CoverageError(ProcDiffError):
    """Not enough image-bearing steps to satisfy a prompt scenario."""


class NoFrameError(ProcDiffError):
    """A step's time span contains no sampled frames."""


class EmptyCorpusError(ProcDiffError):
    """Preprocessing produced zero usable recipes."""


class DecodeError(ProcDiffError):
    """An image could not be decoded."""


class NumericalError(ProcDiffError, ArithmeticError):
    """Non-finite or degenerate numeric input or output."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class UndefinedMetricError(ProcDiffError):
    """A metric is undefined for the given input (e.g. a single-step recipe)."""


class ConfigurationError(ProcDiffError):
    """Incompatible configuration, e.g. scenario and memory kind mismatch."""


class EditError(ProcDiffError):
    """A recipe edit could not be applied."""
