"""Exception types shared across the engine.

Validation problems raise ``EngineError`` subclasses; genuine I/O failures
propagate as ``OSError`` so callers can tell bad data apart from a bad disk.
"""


class EngineError(Exception):
    """Base class for all validation and contract violations."""


class ZeroVector(EngineError):
    """A vector with zero Euclidean norm cannot be normalized."""


class DimensionMismatch(EngineError):
    """Inputs disagree on the embedding dimension."""


# --- embedding file format ---------------------------------------------------

class FormatError(EngineError):
    """Malformed embedding or checkpoint file."""


class BadMagic(FormatError):
    pass


class BadVersion(FormatError):
    pass


class Truncated(FormatError):
    pass


class TrailingBytes(FormatError):
    pass


class BadModality(FormatError):
    pass


class DuplicateName(FormatError):
    pass


class NonFiniteValue(FormatError):
    pass


# --- prompt construction -----------------------------------------------------

class UnknownCategory(EngineError):
    pass


class WrongCount(EngineError):
    pass


class EmptyFeature(EngineError):
    pass


class DuplicateFeature(EngineError):
    pass


class MissingCategory(EngineError):
    pass


class OutOfRange(EngineError):
    pass


# --- losses and metrics ------------------------------------------------------

class EmptyNegativeSet(EngineError):
    """A singleton super-class has no sibling negatives to score."""


class EmptySet(EngineError):
    pass


class LengthMismatch(EngineError):
    pass


# --- configuration -----------------------------------------------------------

class ParseError(EngineError):
    """Config file parse or range failure; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        self.line = line
        self.key = key
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
