"""
Exception hierarchy shared by every ChainSplitter module.
Everything raised on purpose derives from ChainSplitterError so callers can catch one type.
"""


class ChainSplitterError(Exception):
    """Base class for all ChainSplitter errors."""


# ---- Encoding / crypto ----
class FieldLengthError(ChainSplitterError, ValueError):
    pass


class MalformedBlockError(ChainSplitterError, ValueError):
    pass


class UnknownSchemeError(ChainSplitterError, KeyError):
    pass


class EmptyLeavesError(ChainSplitterError, ValueError):
    pass


# ---- Blockchain connector ----
class HashMismatchError(ChainSplitterError):
    pass


class RetryLimitError(ChainSplitterError):
    pass


class StaleTimestampError(ChainSplitterError):
    pass


class AlreadyValidatedError(ChainSplitterError):
    pass


class DuplicateTransactionError(ChainSplitterError):
    pass


class PoolFullError(ChainSplitterError):
    """Backpressure signal: the pool rejected the incoming transaction."""


class EmptyPoolError(ChainSplitterError):
    pass


class NotLeaderError(ChainSplitterError):
    pass


class NotOwnerError(ChainSplitterError, PermissionError):
    pass


class PermissionDeniedError(ChainSplitterError, PermissionError):
    pass


# ---- Consensus ----
class InvalidBlockError(ChainSplitterError):
    def __init__(self, message, problems=()):
        super().__init__(message)
        self.problems = tuple(problems)


class DuplicateVoteError(ChainSplitterError):
    pass


class StaleVoteError(ChainSplitterError):
    pass


# ---- Cloud connector / cloud store ----
class QuorumTimeoutError(ChainSplitterError, TimeoutError):
    pass


class TransferInterruptedError(ChainSplitterError):
    pass


class HeadGapError(ChainSplitterError):
    pass


class HeadMismatchError(ChainSplitterError):
    pass


class VerificationError(ChainSplitterError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NoQuorumError(ChainSplitterError):
    pass


class AccessDeniedError(ChainSplitterError, PermissionError):
    pass


class RangeUnavailableError(ChainSplitterError, LookupError):
    pass


# ---- Harness ----
class ConfigError(ChainSplitterError, ValueError):
    pass


class UnknownBehaviorError(ChainSplitterError, ValueError):
    pass


class InvariantViolation(ChainSplitterError, AssertionError):
    """Raised when a simulation run breaks a protocol invariant; ``trace`` holds the recent event tail."""

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)

    def __str__(self):
        base = super().__str__()
        if not self.trace:
            return base
        return base + "\n  last events:\n    " + "\n    ".join(self.trace)
