"""
Exception hierarchy for the backtester.

Every error belongs to one category; the CLI turns the category into a
stable exit code (config=2, data=3, training=4, io=5).
"""

from typing import List, Optional


class MtlTsmomError(Exception):
    """Base class for all domain errors."""

    category = "internal"
    exit_code = 1


class ConfigError(MtlTsmomError, ValueError):
    category = "config"
    exit_code = 2


class DataError(MtlTsmomError, ValueError):
    category = "data"
    exit_code = 3


class TrainingError(MtlTsmomError, RuntimeError):
    category = "training"
    exit_code = 4


class ReportIoError(MtlTsmomError, OSError):
    category = "io"
    exit_code = 5


# --- config -----------------------------------------------------------------

class InvalidSpec(ConfigError):
    """A synthetic-market or run specification failed validation."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class InvalidSpan(ConfigError):
    pass


class InvalidKind(ConfigError):
    pass


# --- data -------------------------------------------------------------------

class RowError(DataError):
    """Data error tied to a CSV row (0-based data row, header excluded)."""

    def __init__(self, message: str, row: int, rows: Optional[List[int]] = None):
        self.row = row
        self.rows = rows if rows is not None else [row]
        super().__init__(f"row {row}: {message}")


class MissingColumn(RowError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"missing column '{column}'", row=0)


class UnparseableDate(RowError):
    pass


class PriceInvariantViolation(RowError):
    pass


class DuplicateDate(RowError):
    pass


class MissingDataFile(DataError):
    pass


class DuplicateAssetId(DataError):
    pass


class EmptyInput(DataError):
    pass


class WindowTooLarge(DataError):
    pass


class InsufficientHistory(DataError):
    pass


class NoOverlap(DataError):
    pass


class MisalignedPanels(DataError):
    pass


class ZeroVolatility(DataError):
    pass


class TotalLoss(DataError):
    pass


class TooFewObservations(DataError):
    pass


# --- training ---------------------------------------------------------------

class ShapeMismatch(TrainingError):
    pass


class NonScalarLoss(TrainingError):
    pass


class NoValidData(TrainingError):
    pass
