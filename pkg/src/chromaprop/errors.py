"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes: ContractError and FormatError
exit with 3 (bad data / bad file), NumericError with 4.
"""


class ChromapropError(Exception):
    """Base class for all library errors."""


class ContractError(ChromapropError, ValueError):
    """A call violated a documented precondition (shapes, tags, bounds)."""


class FormatError(ChromapropError, ValueError):
    """A file or config did not match its documented on-disk format."""


class NumericError(ChromapropError, RuntimeError):
    """Training or optimization produced non-finite values."""
