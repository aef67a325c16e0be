"""Exception hierarchy shared by every solver stage."""


class RLQError(Exception):
    """Base class for all errors raised by :mod:`rlq`."""


class ParseError(RLQError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class SchemaError(RLQError):
    pass


class DimensionError(RLQError):
    pass


class SingularR(RLQError):
    def __init__(self, message, regime=None, t=None, min_eig=None):
        self.regime = regime
        self.t = t
        self.min_eig = min_eig
        super().__init__(message)


class IndefiniteReducedQ(RLQError):
    def __init__(self, message, regime=None, t=None, min_eig=None):
        self.regime = regime
        self.t = t
        self.min_eig = min_eig
        super().__init__(message)


class SingularInnerMatrix(RLQError):
    """``R + D^T P D`` failed its Cholesky factorisation."""

    def __init__(self, message, regime=None, t=None, min_eig=None):
        self.regime = regime
        self.t = t
        self.min_eig = min_eig
        super().__init__(message)


class BlowUp(RLQError):
    def __init__(self, message, t=None, count=None):
        self.t = t
        self.count = count
        super().__init__(message)


class NoConvergence(RLQError):
    def __init__(self, message, residual=None, iterations=None):
        self.residual = residual
        self.iterations = iterations
        super().__init__(message)


class GridMismatch(RLQError):
    pass


class DegenerateDesign(RLQError):
    pass
