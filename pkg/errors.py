# errors.py
"""
Exception hierarchy shared by every module.

Each error carries an exit code and a human readable detail. The CLI prints the
detail and turns the code into the process exit status:

    0 success, 2 usage, 3 data error, 4 numeric failure
"""
from enum import Enum


EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class PipelineError(Exception):
    exit_code = 1

    def __init__(self, detail: str, exit_code: int | None = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class UsageError(PipelineError):
    exit_code = EXIT_USAGE


class DataError(PipelineError):
    exit_code = EXIT_DATA


class NumericError(PipelineError):
    exit_code = EXIT_NUMERIC


class UndefinedCorrelationError(NumericError):
    """Pearson r requested on a constant vector."""


class GraphError(NumericError):
    """Autodiff contract violation."""


class FormatErrorCode(str, Enum):
    BAD_MAGIC = "bad_magic"
    BAD_VERSION = "bad_version"
    TRUNCATED = "truncated"
    NON_FINITE = "non_finite"
    SHORT_STREAMLINE = "short_streamline"
    TRAILING_DATA = "trailing_data"
    BAD_TEXT = "bad_text"
    SHAPE_MISMATCH = "shape_mismatch"
    OUT_OF_RANGE = "out_of_range"


class BundleFormatError(DataError):
    """Malformed streamline bundle or scalar map; names the byte offset of the problem."""

    def __init__(self, code: FormatErrorCode, offset: int, detail: str):
        super().__init__(f"{code.value} at byte {offset}: {detail}")
        self.code = code
        self.offset = offset
        self.reason = detail
