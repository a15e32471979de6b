"""Exception types raised across the package."""


class NarxDecoupleError(Exception):
    """Base class for all package errors."""


class ColumnMismatch(NarxDecoupleError, ValueError):
    pass


class DimensionMismatch(NarxDecoupleError, ValueError):
    pass


class RankDeficient(NarxDecoupleError, ValueError):
    pass


class TooShort(NarxDecoupleError, ValueError):
    pass


class ZeroReference(NarxDecoupleError, ValueError):
    pass


class Diverged(NarxDecoupleError, ArithmeticError):
    """Free-run simulation left the admissible output range."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NonFinite(NarxDecoupleError, ArithmeticError):
    pass


class BinOutOfRange(NarxDecoupleError, ValueError):
    pass


class ZeroSignal(NarxDecoupleError, ValueError):
    pass


class ParseError(NarxDecoupleError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DegenerateGrid(NarxDecoupleError, ValueError):
    pass


class NoProgress(NarxDecoupleError, RuntimeError):
    pass


class ConfigError(NarxDecoupleError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
