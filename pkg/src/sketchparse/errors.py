"""Exception types shared across the toolkit."""


class SketchParseError(Exception):
    """Base class for all toolkit errors."""


class UnbalancedBrackets(SketchParseError):
    pass


class EmptyExpression(SketchParseError):
    pass


class UnclassifiableToken(SketchParseError):
    pass


class ColumnOutOfRange(SketchParseError):
    pass


class SqlSyntaxError(SketchParseError):
    pass


class NonConforming(SketchParseError):
    """An output sequence does not realize the given sketch."""


class NonConformingGold(NonConforming):
    pass


class ShapeMismatch(SketchParseError, ValueError):
    pass


class NonFinite(SketchParseError, FloatingPointError):
    pass


class TargetOutOfRange(SketchParseError, IndexError):
    pass


class EmptySequence(SketchParseError, ValueError):
    pass


class EmptyInput(EmptySequence):
    pass


class EmptySchema(SketchParseError, ValueError):
    pass


class EmptyCatalog(SketchParseError, ValueError):
    pass


class MaxLengthExceeded(SketchParseError):
    pass


class EmptyDataset(SketchParseError, ValueError):
    pass


class LengthMismatch(SketchParseError, ValueError):
    pass


class DatasetParseError(SketchParseError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SketchMismatch(DatasetParseError):
    pass


class CorruptCheckpoint(SketchParseError):
    pass
