"""
ScaForge Errors
~~~~~~~~~~~~~~~
Exception hierarchy shared by every module. Each class carries the exit code
the CLI reports when it escapes a subcommand.
"""

from typing import Optional


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NEGATIVE = 3


class ScaForgeError(Exception):
    """Base class for all ScaForge failures."""
    exit_code = EXIT_DATA


class UsageError(ScaForgeError):
    """Invalid flag combination or flag value not caught by click."""
    exit_code = EXIT_USAGE


# ── Data Errors (exit 2) ───────────────────────────────────────────────────

class DataError(ScaForgeError):
    """Input data, configuration or file could not be used."""
    exit_code = EXIT_DATA


class ConfigError(DataError):
    """Configuration parse or validation failure, naming the offending field."""

    def __init__(
        self,
        message: str,
        field: Optional[str] = None,
        line: Optional[int] = None,
        column: Optional[int] = None,
    ):
        self.field = field
        self.line = line
        self.column = column
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}, column {column}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}")


class DimensionError(DataError):
    """Array shapes do not agree."""


class SupplyFailure(DataError):
    """Supply voltage below the level at which the AES core still works."""


class DegenerateTraces(DataError):
    """Every sample of the trace set is constant; nothing to correlate."""


class TraceFormatError(DataError):
    """Trace file could not be decoded."""


class BadMagic(TraceFormatError):
    pass


class VersionMismatch(TraceFormatError):
    pass


class TruncatedFile(TraceFormatError):
    pass


class DimensionOverflow(TraceFormatError):
    pass


class ModelFormatError(DataError):
    """Detector model file is malformed or from an unsupported version."""


class TrainingDiverged(DataError):
    """Loss became NaN or infinite during training."""


class InterpolationOverflow(DataError):
    """Toom-4 guard-bit invariant violated; indicates an arithmetic bug."""


class CiphertextLengthError(DataError):
    """Ciphertext (or key) byte string has the wrong length."""


class KatFormatError(DataError):
    """Known-answer file could not be parsed."""


# ── Negative Experiment Outcomes (exit 3) ──────────────────────────────────

class ExperimentNegative(ScaForgeError):
    """The tool worked, the experiment result is negative."""
    exit_code = EXIT_NEGATIVE


class NoAttackFound(ExperimentNegative):
    """No swept supply voltage beats the nominal MTD."""

    def __init__(self, message: str, points: Optional[list] = None):
        super().__init__(message)
        self.points = points if points is not None else []


class NotDisclosed(ExperimentNegative):
    """The key was never stably disclosed within the trace budget."""
