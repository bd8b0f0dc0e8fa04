"""Exception hierarchy shared by all esoseg modules."""


class EsosegError(Exception):
    """Base class; ``category`` doubles as the CLI exit-code family."""

    category = "error"


class FormatError(EsosegError, ValueError):
    category = "format"


class TruncationError(FormatError):
    category = "format"


class LabelError(FormatError):
    category = "format"


class ParameterError(EsosegError, ValueError):
    category = "parameter"


class SpecError(ParameterError):
    pass


class ConfigError(ParameterError):
    category = "config"


class SamplingError(EsosegError, RuntimeError):
    category = "data"


class ShapeError(EsosegError, ValueError):
    category = "shape"


class GeometryError(ShapeError):
    pass


class DegenerateError(EsosegError, ValueError):
    category = "data"


class CompatibilityError(EsosegError, ValueError):
    category = "format"


class SchemaError(EsosegError, ValueError):
    category = "format"


class DivergenceError(EsosegError, RuntimeError):
    category = "training"

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}
