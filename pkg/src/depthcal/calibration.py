"""Estimation of the depth noise model and the per-pixel bias functions.

The pipeline runs in two stages:

1. residuals ``z - z*`` are binned by measured depth, a pooled standard
   deviation is computed per bin after removing each pixel's own mean, and a
   quadratic ``sigma(z)`` is fitted to those samples;
2. every pixel gets a quadratic ``mu(z)`` from a weighted least-squares fit
   with weights ``1 / sigma(z)^2`` (the Gaussian maximum-likelihood solution).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .error_model import (
    DEFAULT_SIGMA_FLOOR,
    BiasMap,
    DepthFrame,
    NoiseModel,
    PixelBias,
    SigmaSample,
    noise_sigma,
)
from .errors import (
    DegenerateSystemError,
    DimensionMismatchError,
    InsufficientDataError,
    TooFewDistancesError,
)
from .geometry import CameraIntrinsics, PlaneHessian, RigidTransform, reference_depth_map, transform_plane

log = logging.getLogger(__name__)

DEFAULT_MIN_PAIRS = 10
DEFAULT_SPAN_MIN = 0.5
DEFAULT_MAX_RANGE = 6.0
OUTLIER_GATE = 0.5
SIGMA_FIT_MAX_COND = 1e12
BIAS_FIT_MAX_COND = 1e10


@dataclass(frozen=True)
class DepthPair:
    measured: float
    reference: float

    def __post_init__(self):
        if not (np.isfinite(self.measured) and np.isfinite(self.reference)):
            raise ValueError(f"depth pair must be finite: {self}")
        if not (self.measured > 0 and self.reference > 0):
            raise ValueError(f"depth pair must be positive: {self}")


class PairStore:
    """Measured/reference depth pairs collected per pixel.

    Pairs are kept in appended chunks; :meth:`arrays` returns them in a
    canonical order (pixel, measured, reference) so that anything computed
    from it depends only on the multiset of pairs, not on insertion order.
    """

    def __init__(self, width: int, height: int):
        self.width = int(width)
        self.height = int(height)
        self._chunks: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        self._cache = None

    def __len__(self) -> int:
        return sum(len(c[0]) for c in self._chunks)

    def append(self, pixels, measured, reference) -> None:
        """Append pairs for flat pixel indices ``v * width + u``."""
        pixels = np.asarray(pixels, dtype=np.int64).ravel()
        measured = np.asarray(measured, dtype=np.float64).ravel()
        reference = np.asarray(reference, dtype=np.float64).ravel()
        if not (len(pixels) == len(measured) == len(reference)):
            raise ValueError("pixel, measured and reference arrays differ in length")
        if len(pixels) == 0:
            return
        if pixels.min() < 0 or pixels.max() >= self.width * self.height:
            raise IndexError("pixel index out of range")
        ok = np.isfinite(measured) & np.isfinite(reference) & (measured > 0) & (reference > 0)
        if not ok.all():
            raise ValueError("depth pairs must be finite and positive")
        self._chunks.append((pixels.copy(), measured.copy(), reference.copy()))
        self._cache = None

    def add(self, u: int, v: int, pair: DepthPair) -> None:
        if not (0 <= u < self.width and 0 <= v < self.height):
            raise IndexError(f"pixel ({u}, {v}) out of range")
        self.append([v * self.width + u], [pair.measured], [pair.reference])

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self._cache is None:
            if self._chunks:
                pix = np.concatenate([c[0] for c in self._chunks])
                z = np.concatenate([c[1] for c in self._chunks])
                zr = np.concatenate([c[2] for c in self._chunks])
                order = np.lexsort((zr, z, pix))
                self._cache = (pix[order], z[order], zr[order])
            else:
                empty = np.empty(0)
                self._cache = (np.empty(0, dtype=np.int64), empty, empty)
        return self._cache

    def pairs(self, u: int, v: int) -> list[DepthPair]:
        pix, z, zr = self.arrays()
        idx = v * self.width + u
        lo, hi = np.searchsorted(pix, [idx, idx + 1])
        return [DepthPair(float(a), float(b)) for a, b in zip(z[lo:hi], zr[lo:hi])]

    def counts(self) -> np.ndarray:
        pix = self.arrays()[0]
        return np.bincount(pix, minlength=self.width * self.height).reshape(self.height, self.width)


def default_bin_centers() -> tuple[float, ...]:
    return tuple(round(0.4 + 0.1 * i, 10) for i in range(47))


@dataclass(frozen=True)
class BinningConfig:
    """Depth binning used for the pooled noise estimate.

    ``ddof`` is subtracted once per (pixel, bin) set from the pooled count.
    ``ddof=0`` gives the plain pooled variance; ``ddof=1`` removes the bias
    caused by estimating each pixel's mean from its own samples, which
    matters when sets hold only a handful of samples.
    """

    bin_centers: tuple[float, ...] = field(default_factory=default_bin_centers)
    threshold: float = 0.05
    min_samples_per_bin: int = 3000
    ddof: int = 1

    def __post_init__(self):
        centers = tuple(float(k) for k in self.bin_centers)
        if not centers:
            raise ValueError("at least one bin center is required")
        if any(b <= a for a, b in zip(centers, centers[1:])):
            raise ValueError("bin centers must be strictly increasing")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if int(self.min_samples_per_bin) < 1:
            raise ValueError("min_samples_per_bin must be positive")
        if self.ddof not in (0, 1):
            raise ValueError("ddof must be 0 or 1")
        object.__setattr__(self, "bin_centers", centers)

    @classmethod
    def uniform(cls, start: float, stop: float, step: float, **kwargs) -> "BinningConfig":
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return cls(tuple(round(start + i * step, 10) for i in range(n)), **kwargs)


@dataclass
class ResidualBins:
    """Residual sets per bin: ``sets[i] = (pixel indices, residuals)`` for ``centers[i]``."""

    centers: np.ndarray
    sets: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def from_sets(cls, sets: dict) -> "ResidualBins":
        """Build from ``{center: {pixel: [residuals, ...]}}``."""
        centers = sorted(sets)
        out = []
        for k in centers:
            pix, res = [], []
            for p, values in sorted(sets[k].items()):
                pix.extend([p] * len(values))
                res.extend(values)
            out.append((np.asarray(pix, dtype=np.int64), np.asarray(res, dtype=np.float64)))
        return cls(np.asarray(centers, dtype=np.float64), out)

    def residuals(self, k: float) -> tuple[np.ndarray, np.ndarray]:
        i = int(np.argmin(np.abs(self.centers - k)))
        if abs(self.centers[i] - k) > 1e-9:
            raise KeyError(f"no bin centered at {k}")
        return self.sets[i]


def accumulate_pairs(
    frame: DepthFrame,
    plane_cam: PlaneHessian,
    intrinsics: CameraIntrinsics,
    store: PairStore,
    max_range: float = DEFAULT_MAX_RANGE,
    outlier_gate: float = OUTLIER_GATE,
) -> PairStore:
    """Pair each valid measured depth with the depth of the reference plane along its ray."""
    if not max_range > 0:
        raise ValueError("max_range must be positive")
    shape = (intrinsics.height, intrinsics.width)
    if frame.depths.shape != shape or (store.height, store.width) != shape:
        raise DimensionMismatchError(
            f"frame {frame.width}x{frame.height}, store {store.width}x{store.height}, "
            f"camera {intrinsics.width}x{intrinsics.height}"
        )
    z = frame.depths
    z_ref = reference_depth_map(plane_cam, intrinsics)
    keep = frame.valid & (z <= max_range) & np.isfinite(z_ref)
    keep[keep] &= np.abs(z[keep] - z_ref[keep]) <= outlier_gate
    pixels = np.flatnonzero(keep)
    store.append(pixels, z.ravel()[pixels], z_ref.ravel()[pixels])
    return store


def bin_residuals(store: PairStore, config: BinningConfig) -> ResidualBins:
    """Residual sets ``{z - z* : |z - k| < t}`` per pixel and bin center ``k``."""
    pix, z, zr = store.arrays()
    if len(pix) == 0:
        raise InsufficientDataError("pair store is empty")
    t = config.threshold
    order = np.argsort(z, kind="stable")
    zs = z[order]
    sets = []
    for k in config.bin_centers:
        lo, hi = np.searchsorted(zs, [k - t - 1e-9, k + t + 1e-9])
        cand = np.sort(order[lo:hi])
        sel = cand[np.abs(z[cand] - k) < t]
        sets.append((pix[sel], z[sel] - zr[sel]))
    return ResidualBins(np.asarray(config.bin_centers, dtype=np.float64), sets)


def _pooled_moments(pixels: np.ndarray, residuals: np.ndarray) -> tuple[float, int, int]:
    """Sum of squared deviations from per-pixel means, sample count, set count."""
    if len(residuals) == 0:
        return 0.0, 0, 0
    _, inverse, counts = np.unique(pixels, return_inverse=True, return_counts=True)
    means = np.bincount(inverse, weights=residuals) / counts
    dev = residuals - means[inverse]
    return float(dev @ dev), len(residuals), len(counts)


def pooled_sigma(bins: ResidualBins, k: float, min_samples: int, ddof: int = 0) -> SigmaSample:
    """Pooled standard deviation of bin ``k`` with per-pixel means removed.

    Raises :class:`InsufficientDataError` when fewer than ``min_samples``
    degrees of freedom remain, meaning the bin has to be left out of the
    noise fit.
    """
    pixels, residuals = bins.residuals(k)
    ss, n, sets = _pooled_moments(pixels, residuals)
    dof = n - ddof * sets
    if dof < min_samples or dof <= 0:
        raise InsufficientDataError(f"bin {k:g} m has {dof} pooled samples (< {min_samples})")
    return SigmaSample(float(k), float(np.sqrt(ss / dof)), n)


def _condition(matrix: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.linalg.cond(matrix)
    return np.where(np.isfinite(cond), cond, np.inf)


def fit_sigma_quadratic(samples: Sequence[SigmaSample], sigma_floor: float = DEFAULT_SIGMA_FLOOR) -> NoiseModel:
    """Unweighted least-squares quadratic through the ``(bin_center, sigma)`` samples."""
    samples = tuple(samples)
    k = np.array([s.bin_center for s in samples], dtype=np.float64)
    y = np.array([s.sigma for s in samples], dtype=np.float64)
    if len(np.unique(k)) < 3:
        raise DegenerateSystemError(f"need >= 3 distinct bin centers, got {len(np.unique(k))}")
    X = np.column_stack([k * k, k, np.ones_like(k)])
    A = X.T @ X
    if _condition(A) > SIGMA_FIT_MAX_COND:
        raise DegenerateSystemError("noise fit normal matrix is singular")
    a, b, c = np.linalg.solve(A, X.T @ y)
    return NoiseModel(float(a), float(b), float(c), sigma_floor, samples)


def _weighted_normal_system(z, residual, w):
    X = np.column_stack([z * z, z, np.ones_like(z)])
    return X.T @ (w[:, None] * X), X.T @ (w * residual)


def bias_objective(coefficients, measured, reference, noise: NoiseModel) -> float:
    """Weighted sum of squared bias residuals ``sum (z - z* - mu(z))^2 / sigma(z)^2``."""
    a, b, c = coefficients
    z = np.asarray(measured, dtype=np.float64)
    r = z - np.asarray(reference, dtype=np.float64) - (a * z * z + b * z + c)
    return float(np.sum(r * r / noise_sigma(noise, z) ** 2))


def fit_pixel_bias(
    pairs: Iterable[DepthPair],
    noise: NoiseModel,
    min_pairs: int = DEFAULT_MIN_PAIRS,
    span_min: float = DEFAULT_SPAN_MIN,
    max_condition: float = BIAS_FIT_MAX_COND,
) -> PixelBias:
    """Maximum-likelihood quadratic bias for one pixel.

    Solves the weighted normal equations for ``(a, b, c)`` with design rows
    ``(z^2, z, 1)``, targets ``z - z*`` and weights ``1 / sigma(z)^2``.
    Raises :class:`InsufficientDataError` when the pixel has fewer than
    ``min_pairs`` pairs, a measured-depth span below ``span_min`` or an
    ill-conditioned system.
    """
    pairs = list(pairs)
    if len(pairs) < min_pairs:
        raise InsufficientDataError(f"{len(pairs)} pairs (< {min_pairs})")
    z = np.array([p.measured for p in pairs])
    zr = np.array([p.reference for p in pairs])
    if z.max() - z.min() < span_min:
        raise InsufficientDataError(f"depth span {z.max() - z.min():.3f} m (< {span_min} m)")
    w = 1.0 / noise_sigma(noise, z) ** 2
    A, rhs = _weighted_normal_system(z, z - zr, w)
    if _condition(A) > max_condition:
        raise InsufficientDataError("weighted normal matrix is ill-conditioned")
    a, b, c = np.linalg.solve(A, rhs)
    return PixelBias(float(a), float(b), float(c))


def fit_bias_map(
    store: PairStore,
    noise: NoiseModel,
    min_pairs: int = DEFAULT_MIN_PAIRS,
    span_min: float = DEFAULT_SPAN_MIN,
    max_condition: float = BIAS_FIT_MAX_COND,
) -> BiasMap:
    """:func:`fit_pixel_bias` applied to every pixel of ``store`` at once."""
    pix, z, zr = store.arrays()
    npix = store.width * store.height
    coef = np.zeros((npix, 3))
    valid = np.zeros(npix, dtype=bool)
    if len(pix):
        w = 1.0 / noise_sigma(noise, z) ** 2
        r = z - zr
        z2 = z * z
        powers = (np.ones_like(z), z, z2, z2 * z, z2 * z2)
        moments = [np.bincount(pix, weights=w * zp, minlength=npix) for zp in powers]
        rhs = np.stack(
            [np.bincount(pix, weights=w * r * zp, minlength=npix) for zp in (z2, z, np.ones_like(z))], axis=1
        )
        count = np.bincount(pix, minlength=npix)
        zmax = np.full(npix, -np.inf)
        zmin = np.full(npix, np.inf)
        np.maximum.at(zmax, pix, z)
        np.minimum.at(zmin, pix, z)
        m0, m1, m2, m3, m4 = moments
        A = np.stack(
            [np.stack([m4, m3, m2], 1), np.stack([m3, m2, m1], 1), np.stack([m2, m1, m0], 1)], axis=1
        )
        cand = (count >= min_pairs) & (zmax - zmin >= span_min)
        idx = np.flatnonzero(cand)
        if len(idx):
            ok = _condition(A[idx]) <= max_condition
            idx = idx[ok]
            coef[idx] = np.linalg.solve(A[idx], rhs[idx][..., None])[..., 0]
            valid[idx] = True
    return BiasMap(coef.reshape(store.height, store.width, 3), valid.reshape(store.height, store.width))


@dataclass
class CalibrationResult:
    bias_map: BiasMap
    noise: NoiseModel
    report: dict


def calibrate(
    observations: Sequence[tuple[DepthFrame, PlaneHessian]],
    extrinsics: RigidTransform,
    intrinsics: CameraIntrinsics,
    config: BinningConfig | None = None,
    *,
    min_pairs: int = DEFAULT_MIN_PAIRS,
    span_min: float = DEFAULT_SPAN_MIN,
    max_range: float = DEFAULT_MAX_RANGE,
    outlier_gate: float = OUTLIER_GATE,
    sigma_floor: float = DEFAULT_SIGMA_FLOOR,
) -> CalibrationResult:
    """Run the full calibration on frames paired with planes seen by the reference sensor.

    Planes are given in the reference-sensor frame and moved into the camera
    frame with ``extrinsics`` (reference -> camera).
    """
    config = config or BinningConfig()
    planes_cam = [transform_plane(plane, extrinsics) for _, plane in observations]
    distances = np.array([p.distance for p in planes_cam])
    span = float(distances.max() - distances.min()) if len(distances) else 0.0
    if span < span_min:
        raise TooFewDistancesError(
            f"{len(distances)} plane observations span {span:.3f} m of distance (< {span_min} m)"
        )

    store = PairStore(intrinsics.width, intrinsics.height)
    for (frame, _), plane_cam in zip(observations, planes_cam):
        accumulate_pairs(frame, plane_cam, intrinsics, store, max_range, outlier_gate)
    log.info("accumulated %d pairs from %d frames", len(store), len(observations))

    bins = bin_residuals(store, config)
    samples, per_bin = [], []
    for k, (pixels, residuals) in zip(bins.centers, bins.sets):
        ss, n, sets = _pooled_moments(pixels, residuals)
        entry = {
            "center": float(k),
            "count": n,
            "pixels": sets,
            "sigma_uncorrected": float(np.sqrt(ss / n)) if n else None,
            "sigma": None,
            "used": False,
        }
        try:
            sample = pooled_sigma(bins, k, config.min_samples_per_bin, config.ddof)
        except InsufficientDataError:
            pass
        else:
            samples.append(sample)
            entry.update(sigma=sample.sigma, used=True)
        per_bin.append(entry)

    if len(samples) < 3:
        raise DegenerateSystemError(
            f"only {len(samples)} depth bins reach {config.min_samples_per_bin} pooled samples; "
            "the noise model needs at least 3 (collect more frames or lower the per-bin minimum)"
        )
    noise = fit_sigma_quadratic(samples, sigma_floor)
    fitted = [noise.a * s.bin_center**2 + noise.b * s.bin_center + noise.c for s in samples]
    bias_map = fit_bias_map(store, noise, min_pairs, span_min)
    observed = store.counts() > 0
    report = {
        "frames": len(observations),
        "pairs": len(store),
        "plane_distance_range": [float(distances.min()), float(distances.max())],
        "noise_model": {"a": noise.a, "b": noise.b, "c": noise.c, "sigma_floor": noise.sigma_floor},
        "ddof": config.ddof,
        "bins": per_bin,
        "sigma_fit_residuals": [float(s.sigma - f) for s, f in zip(samples, fitted)],
        "valid_pixels": int(bias_map.valid.sum()),
        "dropped_pixels": int((observed & ~bias_map.valid).sum()),
        "unobserved_pixels": int((~observed).sum()),
    }
    return CalibrationResult(bias_map, noise, report)
