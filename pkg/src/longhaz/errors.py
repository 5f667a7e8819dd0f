"""Exception types raised across the package."""


class LonghazError(ValueError):
    """Base class for input and model errors."""


class PedigreeError(LonghazError):
    pass


class ExpansionError(LonghazError):
    pass


class ModelError(LonghazError):
    pass


class MMEError(LonghazError):
    pass


class ConvergenceError(LonghazError):
    """Raised when the fit exhausts its iteration budget.

    The last iterate is attached as ``result`` so callers can still
    write artifacts.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
