"""Exception types raised by fracopt."""


class FracoptError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(FracoptError, ValueError):
    pass


class NonConvergence(FracoptError, RuntimeError):
    """An iterative solver stopped at ``maxit`` above its tolerance."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class NotPositiveDefinite(FracoptError, ValueError):
    pass


class UnsupportedDomain(FracoptError, ValueError):
    pass


class ClosureOverflow(FracoptError, RuntimeError):
    pass


class InvalidOrder(FracoptError, ValueError):
    pass


class UnsupportedDegree(FracoptError, ValueError):
    pass


class MaxIterations(FracoptError, RuntimeError):
    pass


class AllZero(FracoptError):
    """Every marking indicator vanished; the adaptive loop may stop."""


class InsufficientData(FracoptError, ValueError):
    pass


class ParseError(FracoptError, ValueError):
    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.field = field


class ValidationError(FracoptError, ValueError):
    pass
