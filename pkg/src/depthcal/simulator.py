"""Synthetic planar-wall depth sequences with a known bias field.

Frames are generated from the same model the calibration inverts: for the
true depth ``z*`` of a pixel, the measured depth ``z`` solves

    z - mu(z) = z* + eps,    eps ~ N(0, sigma(z0)^2)

where ``z0`` is the noise-free measurement. The bias mean is therefore an
exact quadratic in the *measured* depth, which is the function the
calibration estimates and the compensation subtracts.

Random streams come from numpy's PCG64 seeded through ``SeedSequence``;
each frame has its own stream keyed on ``(seed, frame index)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .error_model import BiasMap, DepthFrame, PixelBias
from .errors import WallBehindCameraError
from .geometry import CameraIntrinsics, PlaneHessian, RigidTransform, reference_depth_map, transform_plane

RNG_ALGORITHM = "numpy.random.PCG64 via SeedSequence(seed, spawn_key)"
_FRAME_KEY = 0
_WALL_KEY = 1
_FIELD_KEY = 2


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


@dataclass(frozen=True)
class GroundTruthBiasField:
    """Per-pixel true bias coefficients, ``coefficients[v, u] = (a, b, c)``."""

    coefficients: np.ndarray

    def __post_init__(self):
        coef = np.array(self.coefficients, dtype=np.float64)
        if coef.ndim != 3 or coef.shape[2] != 3 or not np.all(np.isfinite(coef)):
            raise ValueError(f"bias field must be a finite (H, W, 3) array, got {coef.shape}")
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)

    @classmethod
    def constant(cls, intrinsics: CameraIntrinsics, bias: PixelBias) -> "GroundTruthBiasField":
        coef = np.broadcast_to(np.array(bias.as_tuple()), (intrinsics.height, intrinsics.width, 3))
        return cls(coef)

    def as_bias_map(self) -> BiasMap:
        return BiasMap(self.coefficients, np.ones(self.coefficients.shape[:2], dtype=bool))

    def max_abs_bias(self, z_min: float, z_max: float, samples: int = 64) -> float:
        z = np.linspace(z_min, z_max, samples)
        a, b, c = (self.coefficients[..., i, None] for i in range(3))
        return float(np.abs(a * z * z + b * z + c).max())


def smooth_bias_field(
    intrinsics: CameraIntrinsics,
    seed: int,
    a_range=(0.002, 0.006),
    b_range=(-0.01, 0.01),
    c_range=(-0.01, 0.01),
    depth_range=(0.5, 4.5),
    max_abs: float = 0.1,
    shape: str = "random",
) -> GroundTruthBiasField:
    """Smooth bias field over the image.

    With ``shape="random"`` each coefficient map is a random quadratic
    polynomial in normalized pixel coordinates ``x, y`` in ``[-1, 1]``; with
    ``shape="bowl"`` it grows with the squared distance from the image center,
    jittered by a small random quadratic. Either way the map is rescaled to
    span its range. If the resulting ``|mu(z)|`` exceeds ``max_abs`` anywhere
    in ``depth_range`` the whole field is scaled down to meet it.
    """
    if shape not in ("random", "bowl"):
        raise ValueError(f"unknown bias field shape {shape!r}")
    rng = _rng(seed, _FIELD_KEY)
    x, y = np.meshgrid(np.linspace(-1.0, 1.0, intrinsics.width), np.linspace(-1.0, 1.0, intrinsics.height))
    basis = [np.ones_like(x), x, y, x * x, x * y, y * y]
    maps = []
    for lo, hi in (a_range, b_range, c_range):
        g = sum(w * f for w, f in zip(rng.uniform(-1.0, 1.0, len(basis)), basis))
        if shape == "bowl":
            g = 4.0 * (x * x + y * y) + 0.5 * g
        span = g.max() - g.min()
        g = (g - g.min()) / span if span > 0 else np.zeros_like(g)
        maps.append(lo + (hi - lo) * g)
    field_ = GroundTruthBiasField(np.stack(maps, axis=-1))
    peak = field_.max_abs_bias(*depth_range)
    if peak > max_abs:
        field_ = GroundTruthBiasField(field_.coefficients * (max_abs / peak))
    return field_


def camera_mount(position=(0.05, 0.0, 0.10), pitch_deg: float = 0.0, yaw_deg: float = 0.0) -> RigidTransform:
    """Reference->camera extrinsics for a camera mounted on a horizontal 2D laser.

    The laser frame is x forward, y left, z up; the camera frame is x right,
    y down, z forward. ``position`` is the camera origin in the laser frame,
    ``pitch_deg`` tilts the camera downwards.
    """
    base = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    p, yw = np.radians(pitch_deg), np.radians(yaw_deg)
    pitch = np.array([[1, 0, 0], [0, np.cos(p), np.sin(p)], [0, -np.sin(p), np.cos(p)]])
    yaw = np.array([[np.cos(yw), 0, -np.sin(yw)], [0, 1, 0], [np.sin(yw), 0, np.cos(yw)]])
    R = pitch @ yaw @ base
    return RigidTransform(R, -R @ np.asarray(position, dtype=np.float64))


def wall_planes(
    extrinsics: RigidTransform,
    camera_distances,
    yaw_deg=0.0,
) -> list[PlaneHessian]:
    """Vertical walls in the laser frame, placed at the given distances from the camera.

    ``yaw_deg`` (scalar or per wall) rotates each wall normal about the laser's
    vertical axis.
    """
    distances = np.atleast_1d(np.asarray(camera_distances, dtype=np.float64))
    yaws = np.radians(np.broadcast_to(np.asarray(yaw_deg, dtype=np.float64), distances.shape))
    to_ref = extrinsics.inverse()
    walls = []
    for d, yaw in zip(distances, yaws):
        n_ref = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        n_cam = extrinsics.rotation @ n_ref
        plane_cam = PlaneHessian.from_coefficients(n_cam, d)
        walls.append(transform_plane(plane_cam, to_ref))
    return walls


def random_wall_planes(
    extrinsics: RigidTransform,
    seed: int,
    count: int,
    distance_range=(0.5, 4.5),
    yaw_range_deg: float = 0.0,
) -> list[PlaneHessian]:
    """Walls at camera distances drawn uniformly from ``distance_range``."""
    rng = _rng(seed, _WALL_KEY)
    distances = rng.uniform(*distance_range, size=count)
    yaws = rng.uniform(-yaw_range_deg, yaw_range_deg, size=count)
    return wall_planes(extrinsics, distances, yaws)


@dataclass(frozen=True)
class SimConfig:
    intrinsics: CameraIntrinsics
    walls: tuple[PlaneHessian, ...]
    extrinsics: RigidTransform = field(default_factory=camera_mount)
    noise: tuple[float, float, float] = (0.0007, 0.0, 0.002)
    quantization_step: float = 0.0
    quantization_coeff: float = 0.0
    seed: int = 0
    frame_interval: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "walls", tuple(self.walls))
        object.__setattr__(self, "noise", tuple(float(v) for v in self.noise))
        if self.quantization_step < 0 or self.quantization_coeff < 0:
            raise ValueError("quantization parameters must be non-negative")


def _invert_bias(coef: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Solve ``z - (a z^2 + b z + c) = target`` for the root continuous with ``a -> 0``."""
    a, b, c = coef[..., 0], coef[..., 1], coef[..., 2]
    q = c + target
    disc = (1.0 - b) ** 2 - 4.0 * a * q
    if np.any(disc[np.isfinite(disc)] < 0):
        raise ValueError("bias field is too strong to be inverted at the simulated depths")
    with np.errstate(invalid="ignore"):
        return 2.0 * q / ((1.0 - b) + np.sqrt(disc))


def simulate_frame(
    config: SimConfig, wall_index: int, truth: GroundTruthBiasField
) -> tuple[DepthFrame, PlaneHessian]:
    """Render wall ``wall_index`` as the biased, noisy camera would see it."""
    K = config.intrinsics
    if truth.coefficients.shape[:2] != K.shape:
        raise ValueError("bias field does not match the camera dimensions")
    wall = config.walls[wall_index]
    z_ref = reference_depth_map(transform_plane(wall, config.extrinsics), K)
    hit = np.isfinite(z_ref)
    if not hit.any():
        raise WallBehindCameraError(f"wall {wall_index} is not in front of the camera")

    eps = _rng(config.seed, _FRAME_KEY, wall_index).standard_normal(K.shape)
    coef = truth.coefficients
    z0 = _invert_bias(coef, z_ref)
    na, nb, nc = config.noise
    sigma = np.maximum(na * z0 * z0 + nb * z0 + nc, 0.0)
    z = _invert_bias(coef, z_ref + sigma * eps) if np.any(sigma > 0) else z0

    step = config.quantization_step + config.quantization_coeff * z * z
    if np.any(step > 0):
        with np.errstate(invalid="ignore", divide="ignore"):
            quantized = np.round(z / step) * step
        z = np.where(step > 0, quantized, z)

    ok = hit & np.isfinite(z) & (z > 0)
    depths = np.where(ok, z, 0.0)
    return DepthFrame(depths), wall


def simulate_sequence(config: SimConfig, truth: GroundTruthBiasField) -> list[tuple[DepthFrame, PlaneHessian]]:
    return [simulate_frame(config, i, truth) for i in range(len(config.walls))]


def generate_dataset(config: SimConfig, truth: GroundTruthBiasField, out_dir, frame_format: str = "png"):
    """Simulate every wall and write the dataset plus ground truth under ``out_dir``.

    Returns the manifest path.
    """
    from . import formats

    observations = simulate_sequence(config, truth)
    return formats.write_simulated_dataset(out_dir, config, truth, observations, frame_format=frame_format)
