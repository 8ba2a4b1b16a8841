"""Additive depth-bias model and frame compensation.

A measured depth is modelled as ``z = z* + beta`` with
``beta ~ N(mu(z), sigma(z)^2)``; ``mu`` is a per-pixel quadratic and
``sigma`` a quadratic shared by all pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError

INVALID_DEPTH = 0.0
DEFAULT_SIGMA_FLOOR = 1e-4


@dataclass(frozen=True)
class DepthFrame:
    """Metric depth raster, shape ``(height, width)``; ``0.0`` marks a missing return."""

    depths: np.ndarray
    invalid_value: float = INVALID_DEPTH

    def __post_init__(self):
        z = np.array(self.depths, dtype=np.float64)
        if z.ndim != 2 or z.size == 0:
            raise ValueError(f"depth frame must be a non-empty 2D array, got shape {z.shape}")
        bad = (z != self.invalid_value) & ~(np.isfinite(z) & (z > 0))
        if bad.any():
            raise ValueError(f"{int(bad.sum())} depth values are neither valid nor the sentinel")
        z.setflags(write=False)
        object.__setattr__(self, "depths", z)

    @property
    def height(self) -> int:
        return self.depths.shape[0]

    @property
    def width(self) -> int:
        return self.depths.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.depths != self.invalid_value


@dataclass(frozen=True)
class PixelBias:
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0

    def __post_init__(self):
        if not all(np.isfinite([self.a, self.b, self.c])):
            raise ValueError(f"bias coefficients must be finite: {self}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.a, self.b, self.c)


@dataclass(frozen=True)
class BiasMap:
    """Per-pixel bias coefficients, ``coefficients[v, u] = (a, b, c)``."""

    coefficients: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        coef = np.array(self.coefficients, dtype=np.float64)
        valid = np.array(self.valid, dtype=bool)
        if coef.ndim != 3 or coef.shape[2] != 3 or valid.shape != coef.shape[:2]:
            raise ValueError(f"inconsistent bias map shapes {coef.shape} / {valid.shape}")
        if not np.all(np.isfinite(coef)):
            raise ValueError("bias coefficients must be finite")
        if np.any(coef[~valid] != 0.0):
            raise ValueError("invalid pixels must carry the zero bias")
        coef.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def zeros(cls, width: int, height: int, valid: bool = True) -> "BiasMap":
        return cls(np.zeros((height, width, 3)), np.full((height, width), valid))

    @property
    def height(self) -> int:
        return self.coefficients.shape[0]

    @property
    def width(self) -> int:
        return self.coefficients.shape[1]

    def pixel(self, u: int, v: int) -> PixelBias:
        return PixelBias(*map(float, self.coefficients[v, u]))

    def evaluate(self, z) -> np.ndarray:
        """``mu_{u,v}(z)`` for every pixel; ``z`` broadcasts against ``(height, width)``."""
        z = np.asarray(z, dtype=np.float64)
        a, b, c = np.moveaxis(self.coefficients, 2, 0)
        return a * (z * z) + b * z + c


@dataclass(frozen=True)
class SigmaSample:
    bin_center: float
    sigma: float
    count: int


@dataclass(frozen=True)
class NoiseModel:
    """Global depth noise ``sigma(z) = a z^2 + b z + c``, clamped below at ``sigma_floor``."""

    a: float
    b: float
    c: float
    sigma_floor: float = DEFAULT_SIGMA_FLOOR
    samples: tuple[SigmaSample, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if not all(np.isfinite([self.a, self.b, self.c])):
            raise ValueError("noise coefficients must be finite")
        if not self.sigma_floor > 0:
            raise ValueError("sigma_floor must be positive")

    def __call__(self, z):
        return noise_sigma(self, z)


def bias_mean(bias: PixelBias, z: float) -> float:
    return bias.a * (z * z) + bias.b * z + bias.c


def noise_sigma(model: NoiseModel, z):
    z = np.asarray(z, dtype=np.float64)
    out = np.maximum(model.a * (z * z) + model.b * z + model.c, model.sigma_floor)
    return float(out) if out.ndim == 0 else out


def compensate_frame(frame: DepthFrame, bias_map: BiasMap) -> DepthFrame:
    """Subtract the per-pixel bias mean, evaluated at the measured depth.

    Results that are not strictly positive are replaced by the sentinel.
    """
    if (frame.height, frame.width) != (bias_map.height, bias_map.width):
        raise DimensionMismatchError(
            f"frame is {frame.width}x{frame.height}, bias map is {bias_map.width}x{bias_map.height}"
        )
    z = frame.depths
    valid = frame.valid
    out = z - bias_map.evaluate(z)
    out[~valid | ~(out > 0)] = frame.invalid_value
    return DepthFrame(out, frame.invalid_value)
