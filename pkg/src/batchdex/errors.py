"""Exception hierarchy shared by every batchdex module."""

from __future__ import annotations


class BatchDexError(Exception):
    """Base class for all engine errors."""


# fixed point / model
class FixedPointOverflow(BatchDexError, OverflowError):
    pass


class AmountOverflow(BatchDexError, OverflowError):
    pass


class PriceOutOfKeyRange(BatchDexError, ValueError):
    pass


class InvalidOffer(BatchDexError, ValueError):
    pass


class Malformed(BatchDexError, ValueError):
    """Raised when a byte string is not a canonical encoding."""


# trie
class DuplicateKey(BatchDexError, KeyError):
    pass


class NotFound(BatchDexError, KeyError):
    pass


class AlreadyDeleted(BatchDexError, KeyError):
    pass


# orderbook
class DuplicateOfferId(BatchDexError, KeyError):
    pass


class InsufficientSupply(BatchDexError, ValueError):
    pass


class MarginalKeyMismatch(BatchDexError, ValueError):
    pass


class CancelledTwice(BatchDexError, KeyError):
    pass


# solving
class SolverStall(BatchDexError, RuntimeError):
    pass


class TooManyAssets(BatchDexError, ValueError):
    pass


class PartitionViolation(BatchDexError, ValueError):
    pass


# execution / pipeline
class ConservationViolation(BatchDexError, AssertionError):
    pass


class StorageFailure(BatchDexError, OSError):
    pass


class ValidationError(BatchDexError):
    """A block failed validation; ``reason`` is one of the reject codes."""

    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail
