"""Planes, rigid transforms and pinhole back-projection.

Conventions
-----------
* A plane is stored in Hessian normal form ``n . x = d`` with ``|n| = 1`` and
  ``d >= 0``.
* :class:`RigidTransform` maps points *from* the reference (laser) frame
  *into* the depth-camera frame: ``x_cam = R @ x_ref + t``.
* Camera rays follow the pinhole model, ``l(z) = z * ((u - cx)/fx, (v - cy)/fy, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, GrazingRayError, NegativeDepthError, NonPositiveDepthError

UNIT_TOL = 1e-9
ORTHO_TOL = 1e-9
GRAZING_TOL = 1e-9


def _vec3(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise GeometryError(f"{name} must have 3 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} must be finite, got {arr}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PlaneHessian:
    normal: np.ndarray
    distance: float

    def __post_init__(self):
        n = _vec3(self.normal, "normal")
        if abs(np.linalg.norm(n) - 1.0) > UNIT_TOL:
            raise GeometryError(f"plane normal must be unit length, |n| = {np.linalg.norm(n)!r}")
        d = float(self.distance)
        if not np.isfinite(d) or d < 0:
            raise GeometryError(f"plane distance must be finite and >= 0, got {d!r}")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "distance", d)

    @classmethod
    def from_coefficients(cls, normal, distance: float) -> "PlaneHessian":
        """Build a plane from any non-zero normal, rescaling and flipping as needed."""
        n = np.asarray(normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm == 0:
            raise GeometryError("plane normal must be non-zero")
        n = n / norm
        d = float(distance) / norm
        if d < 0:
            n, d = -n, -d
        return cls(n, d)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.normal - self.distance


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64)
        if R.shape != (3, 3) or not np.all(np.isfinite(R)):
            raise GeometryError(f"rotation must be a finite 3x3 matrix, got shape {R.shape}")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise GeometryError("rotation must be orthonormal with determinant +1")
        R.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", _vec3(self.translation, "translation"))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quaternion(cls, quaternion, translation) -> "RigidTransform":
        """Quaternion given as ``(w, x, y, z)``; normalized before conversion."""
        q = np.asarray(quaternion, dtype=np.float64)
        if q.shape != (4,) or not np.all(np.isfinite(q)) or np.linalg.norm(q) == 0:
            raise GeometryError(f"quaternion must be 4 finite, non-zero values, got {quaternion!r}")
        w, x, y, z = q / np.linalg.norm(q)
        R = np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )
        return cls(R, translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ first`` (apply ``first``, then ``self``)."""
        return RigidTransform(
            self.rotation @ first.rotation, self.rotation @ first.translation + self.translation
        )

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise GeometryError("image dimensions must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def ray_grid(self) -> np.ndarray:
        """Unit-depth rays ``l(1)`` for every pixel, shape ``(height, width, 3)``."""
        u = (np.arange(self.width, dtype=np.float64) - self.cx) / self.fx
        v = (np.arange(self.height, dtype=np.float64) - self.cy) / self.fy
        rays = np.empty((self.height, self.width, 3))
        rays[..., 0] = u[None, :]
        rays[..., 1] = v[:, None]
        rays[..., 2] = 1.0
        return rays


def transform_plane(plane: PlaneHessian, extrinsics: RigidTransform) -> PlaneHessian:
    """Express ``plane`` in the frame that ``extrinsics`` maps points into.

    Substituting ``x = R^T (x' - t)`` into ``n . x = d`` gives
    ``(R n) . x' = d + (R n) . t``. The result is sign-normalized to ``d' >= 0``.
    """
    n = extrinsics.rotation @ plane.normal
    d = plane.distance + float(n @ extrinsics.translation)
    if d < 0:
        n, d = -n, -d
    # renormalize to keep |n| = 1 against rounding in R @ n
    return PlaneHessian(n / np.linalg.norm(n), d)


def backproject_ray(intrinsics: CameraIntrinsics, pixel: tuple[int, int]) -> np.ndarray:
    u, v = pixel
    if not (0 <= u < intrinsics.width and 0 <= v < intrinsics.height):
        raise GeometryError(f"pixel {pixel} outside {intrinsics.width}x{intrinsics.height} image")
    return np.array([(u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, 1.0])


def backproject_point(intrinsics: CameraIntrinsics, pixel: tuple[int, int], depth: float) -> np.ndarray:
    if not depth > 0:
        raise NonPositiveDepthError(f"depth must be positive, got {depth!r}")
    return depth * backproject_ray(intrinsics, pixel)


def reference_depth(plane_cam: PlaneHessian, ray_dir: np.ndarray) -> float:
    """Depth at which the ray ``z * ray_dir`` meets ``plane_cam``."""
    denom = float(plane_cam.normal @ np.asarray(ray_dir, dtype=np.float64))
    if abs(denom) < GRAZING_TOL:
        raise GrazingRayError(f"ray is parallel to the plane (n . l = {denom:.3e})")
    z = plane_cam.distance / denom
    if not z > 0:
        raise NegativeDepthError(f"plane lies behind the camera along this ray (z* = {z!r})")
    return z


def reference_depth_map(plane_cam: PlaneHessian, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Vectorized :func:`reference_depth` over the whole image.

    Pixels whose ray grazes the plane or hits it behind the camera are set to
    ``nan``.
    """
    denom = intrinsics.ray_grid() @ plane_cam.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        z = plane_cam.distance / denom
    z[(np.abs(denom) < GRAZING_TOL) | ~(z > 0)] = np.nan
    return z


def backproject_frame(intrinsics: CameraIntrinsics, depths: np.ndarray, mask=None) -> np.ndarray:
    """Back-project the pixels selected by ``mask`` (default: depth > 0) to an (N, 3) cloud."""
    depths = np.asarray(depths, dtype=np.float64)
    if mask is None:
        mask = depths > 0
    rays = intrinsics.ray_grid()[mask]
    return rays * depths[mask][:, None]
