"""Exception types raised across the package."""


class StmError(Exception):
    pass


class DegenerateRotationError(StmError, ValueError):
    pass


class SingularCovarianceError(StmError, ValueError):
    pass


class IncompatibleFieldsError(StmError, ValueError):
    pass


class InvalidWeightsError(StmError, ValueError):
    pass


class ConfigurationError(StmError, ValueError):
    pass


class ShapeMismatchError(StmError, ValueError):
    pass


class DegenerateDepthError(StmError, ValueError):
    pass


class InvalidCameraError(StmError, ValueError):
    pass


class NonFiniteLossError(StmError, RuntimeError):
    pass
