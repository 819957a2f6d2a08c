"""Exception and warning types raised across the package."""


class MSTGCNError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(MSTGCNError, ValueError):
    pass


class ParameterError(MSTGCNError, ValueError):
    pass


class NormalizationError(MSTGCNError, ValueError):
    pass


class LabelError(MSTGCNError, ValueError):
    pass


class ContextError(MSTGCNError, ValueError):
    pass


class OrderingError(MSTGCNError, ValueError):
    pass


class EvaluationError(MSTGCNError, ArithmeticError):
    """A function produced a non-finite value where a finite one was required."""


class DivergenceError(EvaluationError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FormatError(MSTGCNError, ValueError):
    """Malformed binary container; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ParseError(MSTGCNError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DegenerateGraphWarning(UserWarning):
    pass


class DegenerateLayoutWarning(UserWarning):
    pass


class MetricWarning(UserWarning):
    pass
