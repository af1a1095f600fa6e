"""Exception hierarchy shared by all subpackages."""


class AstroOutliersError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(AstroOutliersError, ValueError):
    """Array dimensions are incompatible with the requested operation."""


class ConfigError(AstroOutliersError, ValueError):
    """A configuration value violates its documented constraints."""


class StateError(AstroOutliersError, RuntimeError):
    """An operation was invoked in the wrong lifecycle state."""


class DataError(AstroOutliersError, ValueError):
    """Input data cannot satisfy the request (missing sources, bad values)."""


class ParseError(DataError):
    """A catalog row or file could not be parsed."""


class MetricError(AstroOutliersError, ValueError):
    """A metric is undefined for the given inputs."""


class TrainingDivergedError(AstroOutliersError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged (non-finite loss) at epoch {epoch}")


class ModelLoadError(AstroOutliersError, IOError):
    """Base class for model persistence failures."""


class CorruptManifestError(ModelLoadError):
    pass


class ManifestShapeError(ModelLoadError):
    def __init__(self, layer, expected, found):
        self.layer = layer
        super().__init__(f"layer {layer!r}: manifest shape {tuple(found)} does not match expected {tuple(expected)}")


class TruncatedPayloadError(ModelLoadError):
    pass
