"""Exception types raised across the package."""


class InvalidDimensionError(ValueError):
    pass


class InvalidCovarianceError(ValueError):
    pass


class InvalidInputError(ValueError):
    pass


class InvalidTemperatureError(ValueError):
    pass


class AsymmetricMatrixError(ValueError):
    pass


class EmptyBatchError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite.

    ``record`` holds the diagnostic snapshot at the failing iteration and
    ``log`` the partial training log up to that point.
    """

    def __init__(self, message, record=None, log=None):
        super().__init__(message)
        self.record = record
        self.log = log
