"""
Error types for the PATE privacy accounting engine.

Every error carries a machine-readable category and the process exit code
the command-line front end reports for it.
"""

from typing import Optional


class PateError(Exception):
    """Base class for all expected failures."""

    category = "error"
    exit_code = 1

    def __init__(self, message: str, remedy: Optional[str] = None):
        super().__init__(message)
        self.remedy = remedy

    def describe(self) -> str:
        text = f"{self.category}: {self}"
        if self.remedy:
            text += f"\n💡 {self.remedy}"
        return text


class InvalidParameterError(PateError, ValueError):
    category = "invalid-parameter"
    exit_code = 2


class GridMismatchError(PateError, ValueError):
    category = "grid-mismatch"
    exit_code = 3


class EmptyInputError(PateError, ValueError):
    category = "empty-input"
    exit_code = 4


class InvalidVoteError(PateError, ValueError):
    category = "invalid-vote"
    exit_code = 5


class PlanInfeasibleError(PateError):
    category = "plan-infeasible"
    exit_code = 6


class VoteFileParseError(PateError):
    category = "parse-error"
    exit_code = 7

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class DimensionMismatchError(PateError, ValueError):
    category = "dimension-mismatch"
    exit_code = 8


class ConfigError(PateError):
    category = "config-error"
    exit_code = 9


class HistoryFormatError(PateError):
    category = "history-format"
    exit_code = 10
