"""Local-distortion and global-error metrics on planar reconstructions."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .error_model import DepthFrame
from .errors import DegenerateCloudError, DimensionMismatchError, EmptyCloudError
from .geometry import CameraIntrinsics, PlaneHessian, backproject_frame, reference_depth_map

INLIER_GATE = 0.2
BUCKET_WIDTH = 0.25
CSV_COLUMNS = ("distance_m", "rms_raw_m", "rms_calibrated_m", "n_points")


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    pixels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite points")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


def _points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def fit_plane_tls(cloud) -> PlaneHessian:
    """Total-least-squares plane: smallest-eigenvalue direction of the scatter matrix."""
    pts = _points(cloud)
    if len(pts) < 3:
        raise DegenerateCloudError(f"need at least 3 points, got {len(pts)}")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    evals, evecs = np.linalg.eigh(centered.T @ centered)
    if evals[1] <= 1e-12 * max(evals[2], np.finfo(float).tiny):
        raise DegenerateCloudError("points are collinear or coincident")
    return PlaneHessian.from_coefficients(evecs[:, 0], float(evecs[:, 0] @ centroid))


def rms_perpendicular(cloud, plane: PlaneHessian) -> float:
    pts = _points(cloud)
    if len(pts) == 0:
        raise EmptyCloudError("cannot compute an RMS over an empty cloud")
    r = pts @ plane.normal - plane.distance
    return float(np.sqrt(np.mean(r * r)))


def mean_signed_offset(cloud, plane: PlaneHessian) -> float:
    pts = _points(cloud)
    if len(pts) == 0:
        raise EmptyCloudError("cannot average over an empty cloud")
    return float(np.mean(pts @ plane.normal - plane.distance))


def wall_inlier_mask(
    frame: DepthFrame, plane_cam: PlaneHessian, intrinsics: CameraIntrinsics, gate: float = INLIER_GATE
) -> np.ndarray:
    """Pixels whose raw depth is within ``gate`` of the reference plane along the ray."""
    z_ref = reference_depth_map(plane_cam, intrinsics)
    with np.errstate(invalid="ignore"):
        return frame.valid & np.isfinite(z_ref) & (np.abs(frame.depths - z_ref) < gate)


@dataclass(frozen=True)
class EvalRecord:
    nominal_distance: float
    rms_raw: float
    rms_calibrated: float
    point_count: int
    offset_raw: float = 0.0
    offset_calibrated: float = 0.0


def _clouds(raw: DepthFrame, calibrated: DepthFrame, intrinsics: CameraIntrinsics, mask):
    shape = (intrinsics.height, intrinsics.width)
    if raw.depths.shape != shape or calibrated.depths.shape != shape:
        raise DimensionMismatchError("frames do not match the camera dimensions")
    keep = raw.valid & calibrated.valid
    if mask is not None:
        if np.shape(mask) != shape:
            raise DimensionMismatchError("inlier mask does not match the camera dimensions")
        keep &= np.asarray(mask, dtype=bool)
    return (
        backproject_frame(intrinsics, raw.depths, keep),
        backproject_frame(intrinsics, calibrated.depths, keep),
    )


def evaluate_local(
    frame_pairs: Sequence[tuple[DepthFrame, DepthFrame]],
    intrinsics: CameraIntrinsics,
    inlier_masks: Sequence[np.ndarray | None] | None = None,
) -> list[EvalRecord]:
    """RMS distance of raw and calibrated clouds to their own best-fit planes."""
    masks = inlier_masks if inlier_masks is not None else [None] * len(frame_pairs)
    records = []
    for (raw, cal), mask in zip(frame_pairs, masks):
        raw_pts, cal_pts = _clouds(raw, cal, intrinsics, mask)
        raw_plane, cal_plane = fit_plane_tls(raw_pts), fit_plane_tls(cal_pts)
        records.append(
            EvalRecord(
                raw_plane.distance,
                rms_perpendicular(raw_pts, raw_plane),
                rms_perpendicular(cal_pts, cal_plane),
                len(raw_pts),
            )
        )
    return records


def evaluate_global(
    frame_pairs: Sequence[tuple[DepthFrame, DepthFrame]],
    reference_planes: Sequence[PlaneHessian],
    intrinsics: CameraIntrinsics,
    inlier_masks: Sequence[np.ndarray | None] | None = None,
) -> list[EvalRecord]:
    """RMS distance of raw and calibrated clouds to the reference plane (camera frame)."""
    masks = inlier_masks if inlier_masks is not None else [None] * len(frame_pairs)
    records = []
    for (raw, cal), plane, mask in zip(frame_pairs, reference_planes, masks):
        raw_pts, cal_pts = _clouds(raw, cal, intrinsics, mask)
        records.append(
            EvalRecord(
                plane.distance,
                rms_perpendicular(raw_pts, plane),
                rms_perpendicular(cal_pts, plane),
                len(raw_pts),
                mean_signed_offset(raw_pts, plane),
                mean_signed_offset(cal_pts, plane),
            )
        )
    return records


def bucket_records(records: Sequence[EvalRecord], width: float = BUCKET_WIDTH) -> list[EvalRecord]:
    """Pool records into distance buckets of ``width`` metres.

    RMS values are pooled over points (square root of the point-weighted mean
    square); the bucket's distance is its center.
    """
    groups: dict[int, list[EvalRecord]] = {}
    for rec in records:
        groups.setdefault(int(np.floor(rec.nominal_distance / width)), []).append(rec)
    out = []
    for key in sorted(groups):
        recs = groups[key]
        n = np.array([r.point_count for r in recs], dtype=np.float64)
        total = n.sum()
        if total == 0:
            continue

        def pool(attr):
            return float(np.sqrt(np.sum(n * np.array([getattr(r, attr) for r in recs]) ** 2) / total))

        def mean(attr):
            return float(np.sum(n * np.array([getattr(r, attr) for r in recs])) / total)

        out.append(
            EvalRecord(
                (key + 0.5) * width,
                pool("rms_raw"),
                pool("rms_calibrated"),
                int(total),
                mean("offset_raw"),
                mean("offset_calibrated"),
            )
        )
    return out


def write_eval_csv(path, buckets: Sequence[EvalRecord]) -> Path:
    from .formats import atomic_write

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for b in buckets:
        writer.writerow([f"{b.nominal_distance:.4f}", f"{b.rms_raw:.9f}", f"{b.rms_calibrated:.9f}", b.point_count])
    return atomic_write(path, buf.getvalue())


def read_eval_csv(path) -> list[EvalRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected evaluation CSV header {reader.fieldnames}")
        return [
            EvalRecord(float(r["distance_m"]), float(r["rms_raw_m"]), float(r["rms_calibrated_m"]), int(r["n_points"]))
            for r in reader
        ]
