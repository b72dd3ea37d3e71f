class CsdReconError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatchError(CsdReconError, ValueError):
    pass


class CsdFormatError(CsdReconError, ValueError):
    """Malformed CSD1 container or CSV export."""


class CheckpointError(CsdReconError, ValueError):
    """Malformed or truncated QDDM checkpoint."""


class CheckpointMismatchError(CheckpointError):
    """Checkpoint does not fit the requested schedule or layout."""


class MaskSpecError(CsdReconError, ValueError):
    pass


class NumericFaultError(CsdReconError, ArithmeticError):
    """Non-finite value reached a gradient or a loss."""


class InsufficientDataError(CsdReconError, ValueError):
    pass


class MetricUndefinedError(CsdReconError, ValueError):
    pass


class DataLeakError(CsdReconError, RuntimeError):
    """A held-out test id reached a training batch."""


class ConfigError(CsdReconError, ValueError):
    pass
