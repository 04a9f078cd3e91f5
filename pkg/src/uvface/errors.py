"""Exception types raised across the pipeline."""


class UVFaceError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(UVFaceError):
    """Configuration is well-formed JSON but semantically invalid."""


class ConfigParseError(ConfigError):
    """Configuration text is not valid JSON."""


class FormatError(UVFaceError):
    """A data list, mesh or signature file is malformed."""


class InsufficientLandmarksError(UVFaceError):
    pass


class SingularDesignError(UVFaceError):
    pass


class DegeneratePoseError(UVFaceError):
    pass


class ResolutionError(UVFaceError):
    pass


class LayoutError(UVFaceError):
    pass


class DimensionError(UVFaceError):
    pass


class ShapeMismatchError(UVFaceError):
    """Two signatures (or templates) cannot be compared."""


class NoOverlapError(UVFaceError):
    """Two signatures share no mutually usable patch."""


class PoseRangeError(UVFaceError):
    pass


class EvaluationError(UVFaceError):
    pass
