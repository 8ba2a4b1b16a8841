"""Per-pixel depth bias calibration for structured-light depth cameras."""

__version__ = "0.1.0"

from .calibration import BinningConfig, PairStore, calibrate, fit_pixel_bias, fit_sigma_quadratic  # noqa: E402
from .error_model import BiasMap, DepthFrame, NoiseModel, PixelBias, compensate_frame  # noqa: E402
from .geometry import CameraIntrinsics, PlaneHessian, RigidTransform, transform_plane  # noqa: E402

__all__ = [
    "BiasMap",
    "BinningConfig",
    "CameraIntrinsics",
    "DepthFrame",
    "NoiseModel",
    "PairStore",
    "PixelBias",
    "PlaneHessian",
    "RigidTransform",
    "calibrate",
    "compensate_frame",
    "fit_pixel_bias",
    "fit_sigma_quadratic",
    "transform_plane",
]
