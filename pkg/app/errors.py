"""
Exception hierarchy shared by every pipeline stage

Library code raises these; only the CLI turns them into exit codes.
"""

from typing import Optional


class RapError(Exception):
    """Base class for all pipeline errors"""

    exit_code = 3


class UsageError(RapError):
    """Bad flags or an empty/invalid request"""

    exit_code = 2


class ConfigError(UsageError):
    """Run configuration could not be parsed or is incomplete"""

    def __init__(self, message: str, line_number: Optional[int] = None, key: Optional[str] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number
        self.key = key


class DataError(RapError):
    """Input data is missing, unreadable or too short"""

    exit_code = 3

    def __init__(self, message: str, path: Optional[str] = None):
        if path is not None:
            message = f"{message} [{path}]"
        super().__init__(message)
        self.path = path


class FormatError(DataError):
    """A binary container (WAV, RAPV, RAPC) failed validation"""

    def __init__(self, message: str, field: Optional[str] = None, path: Optional[str] = None):
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message, path=path)
        self.field = field


class ShapeError(DataError):
    """Tensor shapes do not line up"""


class ContractError(RapError):
    """A documented precondition was violated by the caller"""

    exit_code = 3


class NumericError(RapError):
    """Training produced a non-finite value"""

    exit_code = 4

    def __init__(self, message: str, step: Optional[int] = None, t: Optional[float] = None, y: Optional[int] = None):
        details = [f"{name}={value}" for name, value in (("step", step), ("t", t), ("y", y)) if value is not None]
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)
        self.step = step
        self.t = t
        self.y = y
