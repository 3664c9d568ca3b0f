"""Exception hierarchy shared across the engine.

Every error carries an ``exit_code`` so the CLI can map failures onto
distinct process exit statuses: 2 usage, 3 data, 4 numeric, 5 I/O.
"""


class EngineError(Exception):
    exit_code = 1


class UsageError(EngineError):
    """Bad flags, unknown config keys, malformed run specs."""

    exit_code = 2


class DataError(EngineError):
    """Dataset / episode / catalog contract violations."""

    exit_code = 3


class NumericError(EngineError):
    """Non-finite values or failed numeric checks."""

    exit_code = 4


class IoError(EngineError):
    """File and store problems."""

    exit_code = 5


class DimensionError(DataError):
    """Kernel shape mismatch; message names the kernel and offending shapes."""


class ContractError(DataError):
    """An operation was called outside its stated preconditions."""


class MissingExampleError(DataError):
    """An example id was not found in the backing store."""


class StoreError(IoError):
    """Embedding-store file problem. ``code`` distinguishes the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code
