"""Wall plane extraction from a single 2D laser scan."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoLineError
from .geometry import PlaneHessian


@dataclass(frozen=True)
class LaserScan2D:
    angle_min: float
    angle_increment: float
    ranges: np.ndarray

    def __post_init__(self):
        r = np.array(self.ranges, dtype=np.float64).ravel()
        if len(r) < 2:
            raise ValueError("a scan needs at least two ranges")
        if self.angle_increment == 0:
            raise ValueError("angle_increment must be non-zero")
        r.setflags(write=False)
        object.__setattr__(self, "ranges", r)

    def points(self) -> np.ndarray:
        """Cartesian points of the valid returns in the scan plane, shape (N, 2)."""
        angles = self.angle_min + self.angle_increment * np.arange(len(self.ranges))
        ok = np.isfinite(self.ranges) & (self.ranges > 0)
        r = self.ranges[ok]
        return np.column_stack([r * np.cos(angles[ok]), r * np.sin(angles[ok])])


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 200
    inlier_threshold: float = 0.02
    min_inliers: int = 20


def _tls_line(points: np.ndarray) -> tuple[np.ndarray, float]:
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, evecs = np.linalg.eigh(centered.T @ centered)
    normal = evecs[:, 0]
    return normal, float(normal @ centroid)


def extract_plane_from_scan(scan: LaserScan2D, params: RansacParams = RansacParams(), seed: int = 0) -> PlaneHessian:
    """Fit the dominant line of ``scan`` and lift it to a vertical plane.

    RANSAC on pairs of returns picks the line with most inliers, which is then
    refined by total least squares on its inliers. The scanner's vertical axis
    is +z, so the plane normal is ``(nx, ny, 0)``.
    """
    pts = scan.points()
    if len(pts) < max(params.min_inliers, 2):
        raise NoLineError(f"scan has {len(pts)} valid returns (< {params.min_inliers})")
    rng = np.random.default_rng(seed)
    best = None
    best_count = 0
    for _ in range(params.iterations):
        i, j = rng.choice(len(pts), size=2, replace=False)
        direction = pts[j] - pts[i]
        length = np.hypot(*direction)
        if length == 0:
            continue
        normal = np.array([-direction[1], direction[0]]) / length
        inliers = np.abs(pts @ normal - normal @ pts[i]) < params.inlier_threshold
        count = int(inliers.sum())
        if count > best_count:
            best, best_count = inliers, count
    if best is None or best_count < params.min_inliers:
        raise NoLineError(f"best line has {best_count} inliers (< {params.min_inliers})")

    normal, d = _tls_line(pts[best])
    # one re-selection pass with the refined line
    refined = np.abs(pts @ normal - d) < params.inlier_threshold
    if refined.sum() >= params.min_inliers:
        normal, d = _tls_line(pts[refined])
    return PlaneHessian.from_coefficients([normal[0], normal[1], 0.0], d)
