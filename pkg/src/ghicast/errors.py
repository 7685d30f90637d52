"""Exception hierarchy shared by every stage of the workbench.

The CLI maps the three families onto process exit codes: configuration
problems exit with 2, data problems with 3 and numerical failures with 4.
"""


class GhicastError(Exception):
    exit_code = 1


class ConfigError(GhicastError, ValueError):
    exit_code = 2


class DataError(GhicastError):
    exit_code = 3


class SchemaError(DataError):
    """A required column is absent from the input header."""

    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"missing required column {column!r}")


class RowError(DataError):
    """A record could not be parsed; ``line`` is 1-based and counts the header."""

    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class DataQualityError(DataError):
    pass


class FetchError(DataError):
    """Remote retrieval failed.

    ``retryable`` is True for transport problems (connection refused, timeouts)
    and False for an HTTP response with a non-success status.
    """

    def __init__(self, message, status=None, retryable=False):
        self.status = status
        self.retryable = retryable
        super().__init__(message)


class NumericalError(GhicastError, ArithmeticError):
    exit_code = 4


class FitError(NumericalError):
    pass


class ProtocolError(GhicastError, ValueError):
    """Evaluation protocol violated (for example train/evaluation overlap)."""

    exit_code = 2
