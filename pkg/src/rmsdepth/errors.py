"""Exception types shared across the package."""


class RmsError(Exception):
    """Base class for all structured errors raised by rmsdepth."""


class ShapeError(RmsError, ValueError):
    pass


class NonFiniteError(RmsError, FloatingPointError):
    pass


class StaleResidualsError(RmsError):
    """Backward called with residuals that do not belong to the given inputs."""


class TapeError(RmsError):
    pass


class UntrainableSampleError(RmsError, ValueError):
    pass


class DatasetFormatError(RmsError):
    pass


class CheckpointFormatError(RmsError):
    pass


class ConfigError(RmsError, ValueError):
    pass
