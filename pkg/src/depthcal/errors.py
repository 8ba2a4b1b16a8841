"""Exception hierarchy.

Every error carries a short ``code`` (e.g. ``"TooFewDistances"``) that the
command line prints verbatim so scripts can match on it.
"""


class DepthCalError(Exception):
    code = "DepthCalError"


class GeometryError(DepthCalError):
    code = "GeometryError"


class GrazingRayError(GeometryError):
    code = "GrazingRay"


class NegativeDepthError(GeometryError):
    code = "NegativeDepth"


class NonPositiveDepthError(GeometryError):
    code = "NonPositiveDepth"


class DimensionMismatchError(DepthCalError):
    code = "DimensionMismatch"


class InsufficientDataError(DepthCalError):
    code = "Insufficient"


class DegenerateSystemError(DepthCalError):
    code = "DegenerateSystem"


class TooFewDistancesError(DepthCalError):
    code = "TooFewDistances"


class DegenerateCloudError(DepthCalError):
    code = "DegenerateCloud"


class EmptyCloudError(DepthCalError):
    code = "EmptyCloud"


class WallBehindCameraError(DepthCalError):
    code = "WallBehindCamera"


class UnsupportedFormatError(DepthCalError):
    code = "UnsupportedFormat"


class CorruptFileError(DepthCalError):
    code = "CorruptFile"


class NoLineError(DepthCalError):
    code = "NoLine"
