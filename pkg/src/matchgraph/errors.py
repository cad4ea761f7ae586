"""Exception taxonomy shared across the package.

Parse errors carry the byte offset at which the input became unusable so
that corrupt files can be diagnosed without a hex editor.
"""


class MatchgraphError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateVector(MatchgraphError):
    """A descriptor row is unusable (zero norm or non-finite entries)."""


class DimensionError(MatchgraphError):
    """Operands have incompatible shapes."""


class UnknownImage(MatchgraphError):
    """An image id is not present in the collection being queried."""


class InvalidAdjacency(MatchgraphError):
    """An adjacency matrix violates the symmetric 0/1 zero-diagonal contract."""


class EmptyLossSet(MatchgraphError):
    """A subgraph has no 1-hop nodes, so the training loss is undefined."""


class NoTrainingData(MatchgraphError):
    """No usable training subgraph could be built from the given queries."""


class ParseError(MatchgraphError):
    """A serialized artifact could not be decoded."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MalformedHeader(ParseError):
    """The leading header bytes of a file are invalid or incomplete."""


class VersionMismatch(ParseError):
    """The file declares a format version this code does not understand."""


class TruncatedPayload(ParseError):
    """The file ended before the payload its header promised."""


class NonFiniteValue(ParseError):
    """A NaN or infinity was found where a finite number is required."""


class DuplicateId(ParseError):
    """The same image id occurs more than once."""


class InvalidRecord(ParseError):
    """A record line or field does not match the expected format."""


class ShapeCorruption(ParseError):
    """Stored tensor shapes are inconsistent with each other."""
