"""Exception hierarchy shared by every CAM Traffic Model module."""

from typing import Optional


class CamModelError(Exception):
    """Base class for all toolkit errors (CLI exit code 2)."""


class SymbolIndexError(CamModelError, IndexError):
    pass


class ModelValidationError(CamModelError, ValueError):
    pass


class ModelFileError(ModelValidationError):
    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class TraceFormatError(CamModelError, ValueError):
    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class TraceValidationError(CamModelError, ValueError):
    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class EmptyModelError(CamModelError):
    pass


class InsufficientDataError(CamModelError):
    pass


class BinDetectionError(CamModelError):
    pass


class AlphabetMismatchError(CamModelError, ValueError):
    pass


class UndefinedCorrelationError(CamModelError, ValueError):
    pass
