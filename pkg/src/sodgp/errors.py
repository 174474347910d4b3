"""Exception hierarchy shared across the package."""


class SodgpError(Exception):
    """Base class for all errors raised by sodgp."""


class DimensionMismatch(SodgpError, ValueError):
    pass


class NotPositiveDefinite(SodgpError, ArithmeticError):
    pass


class NonScalarRoot(SodgpError, ValueError):
    pass


class InvalidArchitecture(SodgpError, ValueError):
    pass


class DegenerateData(SodgpError, ValueError):
    pass


class InvalidSize(SodgpError, ValueError):
    pass


class NumericalDivergence(SodgpError, ArithmeticError):
    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"ELBO became non-finite at iteration {iteration}")


class UntrainedModel(SodgpError, RuntimeError):
    pass


class ParseError(SodgpError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingTarget(SodgpError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing target column"


class InvalidFraction(SodgpError, ValueError):
    pass


class VersionMismatch(SodgpError, ValueError):
    pass


class ChecksumMismatch(SodgpError, ValueError):
    pass
