"""Exception types shared across the package."""


class FracBsdeError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(FracBsdeError):
    """A model ingredient violates one of its structural conditions.

    Carries optional ``witnesses``: a list of dicts locating the failure
    (offending time point, condition name, sampled arguments, ...).
    """

    def __init__(self, message, witnesses=None):
        super().__init__(message)
        self.witnesses = list(witnesses) if witnesses else []


class NumericalError(FracBsdeError):
    """A linear-algebra or quadrature step failed numerically."""


class NonConvergenceError(FracBsdeError):
    """The Picard iteration stalled above its noise floor.

    The recorded ``diagnostics`` object is attached.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics
