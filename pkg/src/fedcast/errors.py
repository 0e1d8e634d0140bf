"""Exception taxonomy shared across the package.

Each error class carries the process exit code the CLI maps it to.
"""


class FedcastError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(FedcastError):
    """Invalid or inconsistent run configuration."""

    exit_code = 1


class DataError(FedcastError):
    """Input data violates a contract (gaps, negatives, insufficient span)."""

    exit_code = 2


class IngestError(DataError):
    """CSV ingestion failure; names the offending row where known."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"{message} (row {row})"
        super().__init__(message)
        self.row = row


class NumericFault(FedcastError):
    """Non-finite value surfaced during training or evaluation."""

    exit_code = 3

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} ({step})"
        super().__init__(message)
        self.step = step


class ProtocolError(FedcastError):
    """Malformed frame, bad weight blob, timeout, or peer misbehaviour."""

    exit_code = 4
