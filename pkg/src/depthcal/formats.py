"""On-disk formats: depth rasters, dataset manifests and calibration files.

Dataset layout
--------------
``dataset.json``::

    {
      "intrinsics": {"fx": .., "fy": .., "cx": .., "cy": .., "width": .., "height": ..},
      "extrinsics": {"direction": "reference_to_camera",
                     "rotation": [[...], [...], [...]]   # or "quaternion": [w, x, y, z]
                     "translation": [tx, ty, tz]},
      "records": "planes.jsonl",
      "metadata": {...}
    }

The extrinsics map points from the reference sensor (laser) frame into the
depth-camera frame, ``x_cam = R x_ref + t``.

``planes.jsonl`` holds one record per frame, in increasing timestamp order::

    {"timestamp": 0.0, "frame": "frames/000000.png", "nx": .., "ny": .., "nz": .., "d": ..}

Instead of ``nx .. d`` a record may carry a raw 2D scan
``"scan": {"angle_min": .., "angle_increment": .., "ranges": [...]}``; the
wall plane is then extracted with RANSAC when the manifest is loaded.

Depth frames are 16-bit single-channel PNG/TIFF in millimetres (0 = no
return) or ``.npy`` float arrays in metres.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .error_model import BiasMap, DepthFrame, NoiseModel
from .errors import CorruptFileError, DepthCalError, UnsupportedFormatError
from .geometry import CameraIntrinsics, PlaneHessian, RigidTransform
from .scan import LaserScan2D, RansacParams, extract_plane_from_scan

MAGIC = b"DCAL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII4d")
_RASTER_SUFFIXES = {".png", ".tif", ".tiff"}


def atomic_write(path, data: bytes | str) -> Path:
    """Write ``data`` to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


# -- depth frames -----------------------------------------------------------------


def read_depth_frame(path) -> DepthFrame:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        try:
            arr = np.load(path, allow_pickle=False)
        except (ValueError, OSError) as exc:
            raise CorruptFileError(f"{path}: {exc}") from exc
        if arr.ndim != 2 or arr.dtype.kind != "f":
            raise UnsupportedFormatError(f"{path}: expected a 2D float array, got {arr.dtype} {arr.shape}")
        try:
            return DepthFrame(arr.astype(np.float64))
        except ValueError as exc:
            raise CorruptFileError(f"{path}: {exc}") from exc
    if suffix not in _RASTER_SUFFIXES:
        raise UnsupportedFormatError(f"{path}: unsupported depth frame type {suffix!r}")
    try:
        with Image.open(path) as img:
            if img.mode not in ("I;16", "I;16L", "I;16B"):
                raise UnsupportedFormatError(f"{path}: expected 16-bit single-channel image, got mode {img.mode}")
            mm = np.asarray(img, dtype=np.uint16)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptFileError(f"{path}: {exc}") from exc
    return DepthFrame(mm.astype(np.float64) / 1000.0)


def write_depth_frame(path, frame: DepthFrame) -> Path:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        buf = io.BytesIO()
        np.save(buf, frame.depths, allow_pickle=False)
        return atomic_write(path, buf.getvalue())
    if suffix not in _RASTER_SUFFIXES:
        raise UnsupportedFormatError(f"{path}: unsupported depth frame type {suffix!r}")
    mm = np.where(frame.valid, np.round(frame.depths * 1000.0), 0.0)
    if mm.max(initial=0) > np.iinfo(np.uint16).max:
        raise ValueError(f"{path}: depth exceeds the 16-bit millimetre range")
    buf = io.BytesIO()
    Image.fromarray(mm.astype(np.uint16)).save(buf, format="PNG" if suffix == ".png" else "TIFF")
    return atomic_write(path, buf.getvalue())


# -- camera parameters ----------------------------------------------------------------


def intrinsics_to_dict(K: CameraIntrinsics) -> dict:
    return {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy, "width": K.width, "height": K.height}


def intrinsics_from_dict(d: dict) -> CameraIntrinsics:
    return CameraIntrinsics(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"])


def extrinsics_to_dict(T: RigidTransform) -> dict:
    return {
        "direction": "reference_to_camera",
        "rotation": T.rotation.tolist(),
        "translation": T.translation.tolist(),
    }


def extrinsics_from_dict(d: dict) -> RigidTransform:
    direction = d.get("direction", "reference_to_camera")
    if "quaternion" in d:
        T = RigidTransform.from_quaternion(d["quaternion"], d["translation"])
    else:
        T = RigidTransform(d["rotation"], d["translation"])
    if direction == "camera_to_reference":
        return T.inverse()
    if direction != "reference_to_camera":
        raise ValueError(f"unknown extrinsics direction {direction!r}")
    return T


# -- datasets -------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameRecord:
    timestamp: float
    frame: Path
    plane: PlaneHessian


@dataclass
class Dataset:
    intrinsics: CameraIntrinsics
    extrinsics: RigidTransform
    records: list[FrameRecord]
    metadata: dict = field(default_factory=dict)

    def observations(self) -> list[tuple[DepthFrame, PlaneHessian]]:
        out = []
        for rec in self.records:
            frame = read_depth_frame(rec.frame)
            if frame.depths.shape != self.intrinsics.shape:
                raise CorruptFileError(
                    f"{rec.frame}: frame is {frame.width}x{frame.height}, "
                    f"camera is {self.intrinsics.width}x{self.intrinsics.height}"
                )
            out.append((frame, rec.plane))
        return out

    def content_hash(self) -> str:
        """Order-independent SHA-256 over frame bytes and plane parameters."""
        digests = []
        for rec in self.records:
            h = hashlib.sha256(Path(rec.frame).read_bytes())
            h.update(json.dumps([*rec.plane.normal.tolist(), rec.plane.distance]).encode())
            digests.append(h.hexdigest())
        outer = hashlib.sha256()
        outer.update(json.dumps(intrinsics_to_dict(self.intrinsics), sort_keys=True).encode())
        outer.update(json.dumps(extrinsics_to_dict(self.extrinsics), sort_keys=True).encode())
        for d in sorted(digests):
            outer.update(d.encode())
        return outer.hexdigest()


def _record_plane(rec: dict, where: str, ransac: RansacParams, seed: int) -> PlaneHessian:
    if "scan" in rec:
        s = rec["scan"]
        scan = LaserScan2D(s["angle_min"], s["angle_increment"], s["ranges"])
        return extract_plane_from_scan(scan, ransac, seed)
    try:
        return PlaneHessian.from_coefficients([rec["nx"], rec["ny"], rec["nz"]], rec["d"])
    except KeyError as exc:
        raise CorruptFileError(f"{where}: record lacks plane field {exc}") from exc


def load_manifest(path, ransac: RansacParams = RansacParams(), seed: int = 0) -> Dataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: {exc}") from exc
    root = path.parent
    records_path = root / doc.get("records", "planes.jsonl")
    try:
        lines = records_path.read_text().splitlines()
    except OSError as exc:
        raise CorruptFileError(f"{records_path}: {exc}") from exc

    records = []
    last = -np.inf
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        where = f"{records_path}:{lineno}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorruptFileError(f"{where}: {exc}") from exc
        ts = float(rec["timestamp"])
        if not ts > last:
            raise CorruptFileError(f"{where}: timestamps must increase ({ts} after {last})")
        last = ts
        frame = root / rec["frame"]
        if not frame.exists():
            raise CorruptFileError(f"{where}: frame file {frame} does not exist")
        try:
            plane = _record_plane(rec, where, ransac, seed)
        except DepthCalError as exc:
            raise type(exc)(f"{where}: {exc}") from exc
        records.append(FrameRecord(ts, frame, plane))
    try:
        intrinsics = intrinsics_from_dict(doc["intrinsics"])
        extrinsics = extrinsics_from_dict(doc["extrinsics"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"{path}: bad camera parameters: {exc}") from exc
    return Dataset(intrinsics, extrinsics, records, doc.get("metadata", {}))


def write_manifest(path, dataset: Dataset, records_name: str = "planes.jsonl") -> Path:
    path = Path(path)
    root = path.parent
    lines = []
    for rec in dataset.records:
        n = rec.plane.normal
        lines.append(
            json.dumps(
                {
                    "timestamp": rec.timestamp,
                    "frame": os.path.relpath(rec.frame, root),
                    "nx": float(n[0]),
                    "ny": float(n[1]),
                    "nz": float(n[2]),
                    "d": rec.plane.distance,
                }
            )
        )
    atomic_write(root / records_name, "\n".join(lines) + "\n")
    doc = {
        "intrinsics": intrinsics_to_dict(dataset.intrinsics),
        "extrinsics": extrinsics_to_dict(dataset.extrinsics),
        "records": records_name,
        "metadata": dataset.metadata,
    }
    return atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- calibration files ----------------------------------------------------------------


@dataclass
class CalibrationFile:
    bias_map: BiasMap
    noise: NoiseModel
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def width(self) -> int:
        return self.bias_map.width

    @property
    def height(self) -> int:
        return self.bias_map.height


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def calibration_to_bytes(cal: CalibrationFile) -> bytes:
    """Little-endian binary layout::

        magic "DCAL" | version u32 | width u32 | height u32
        noise a, b, c, sigma_floor   f64 x 4
        coefficients (a, b, c) per pixel, row-major   f64 x 3*W*H
        validity bitmap, row-major, LSB first         ceil(W*H/8) bytes
        metadata length u32 | metadata as UTF-8 JSON (sorted keys)
    """
    n = cal.noise
    meta = _canonical_json(cal.metadata)
    return b"".join(
        [
            _HEADER.pack(MAGIC, cal.version, cal.width, cal.height, n.a, n.b, n.c, n.sigma_floor),
            cal.bias_map.coefficients.astype("<f8").tobytes(order="C"),
            np.packbits(cal.bias_map.valid.ravel(), bitorder="little").tobytes(),
            struct.pack("<I", len(meta)),
            meta,
        ]
    )


def calibration_from_bytes(data: bytes, source="<bytes>") -> CalibrationFile:
    if len(data) < _HEADER.size or data[:4] != MAGIC:
        raise CorruptFileError(f"{source}: missing DCAL header")
    magic, version, width, height, a, b, c, floor = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise UnsupportedFormatError(f"{source}: calibration format version {version} is not supported")
    npix = width * height
    off = _HEADER.size
    coef_end = off + 24 * npix
    bits_end = coef_end + (npix + 7) // 8
    if len(data) < bits_end + 4:
        raise CorruptFileError(f"{source}: truncated calibration file")
    coef = np.frombuffer(data, dtype="<f8", count=3 * npix, offset=off).reshape(height, width, 3)
    valid = np.unpackbits(
        np.frombuffer(data, dtype=np.uint8, count=bits_end - coef_end, offset=coef_end), bitorder="little"
    )[:npix].astype(bool)
    (meta_len,) = struct.unpack_from("<I", data, bits_end)
    if len(data) != bits_end + 4 + meta_len:
        raise CorruptFileError(f"{source}: calibration file length does not match its header")
    try:
        metadata = json.loads(data[bits_end + 4 :].decode("utf-8"))
        bias_map = BiasMap(coef.astype(np.float64), valid.reshape(height, width))
        noise = NoiseModel(a, b, c, floor)
    except ValueError as exc:
        raise CorruptFileError(f"{source}: {exc}") from exc
    return CalibrationFile(bias_map, noise, metadata, version)


def calibration_to_json(cal: CalibrationFile) -> str:
    n = cal.noise
    doc = {
        "format": MAGIC.decode(),
        "version": cal.version,
        "width": cal.width,
        "height": cal.height,
        "noise": {"a": n.a, "b": n.b, "c": n.c, "sigma_floor": n.sigma_floor},
        "coefficients": cal.bias_map.coefficients.reshape(-1, 3).tolist(),
        "valid": cal.bias_map.valid.ravel().astype(int).tolist(),
        "metadata": cal.metadata,
    }
    return json.dumps(doc, sort_keys=True) + "\n"


def calibration_from_json(text: str, source="<json>") -> CalibrationFile:
    try:
        doc = json.loads(text)
        if doc.get("format") != MAGIC.decode():
            raise CorruptFileError(f"{source}: not a calibration document")
        if doc["version"] != FORMAT_VERSION:
            raise UnsupportedFormatError(f"{source}: calibration format version {doc['version']} is not supported")
        w, h = doc["width"], doc["height"]
        coef = np.array(doc["coefficients"], dtype=np.float64).reshape(h, w, 3)
        valid = np.array(doc["valid"], dtype=bool).reshape(h, w)
        nz = doc["noise"]
        return CalibrationFile(
            BiasMap(coef, valid), NoiseModel(nz["a"], nz["b"], nz["c"], nz["sigma_floor"]), doc["metadata"], doc["version"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"{source}: {exc}") from exc


def write_calibration(path, cal: CalibrationFile, fmt: str = "binary") -> Path:
    if fmt == "binary":
        return atomic_write(path, calibration_to_bytes(cal))
    if fmt == "json":
        return atomic_write(path, calibration_to_json(cal))
    raise UnsupportedFormatError(f"unknown calibration format {fmt!r}")


def read_calibration(path) -> CalibrationFile:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CorruptFileError(f"{path}: {exc}") from exc
    if data[:4] == MAGIC:
        return calibration_from_bytes(data, path)
    if data.lstrip()[:1] == b"{":
        return calibration_from_json(data.decode("utf-8"), path)
    raise UnsupportedFormatError(f"{path}: not a DCAL binary or JSON calibration file")


# -- simulation configs -------------------------------------------------------------


def load_sim_config(path, seed: int | None = None):
    """Read a simulation config; returns ``(SimConfig, GroundTruthBiasField)``.

    ``seed`` overrides the config's sequence seed; the bias-field seed
    (``bias_field.seed``) defaults to the config's own seed so that held-out
    sequences can share the ground truth.
    """
    from . import simulator as sim

    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: {exc}") from exc
    K = intrinsics_from_dict(doc["intrinsics"])
    mount = doc.get("extrinsics")
    if mount is None:
        T = sim.camera_mount()
    elif "position" in mount:
        T = sim.camera_mount(mount["position"], mount.get("pitch_deg", 0.0), mount.get("yaw_deg", 0.0))
    else:
        T = extrinsics_from_dict(mount)
    config_seed = int(doc.get("seed", 0))
    run_seed = config_seed if seed is None else int(seed)

    walls_doc = doc.get("walls", {})
    if isinstance(walls_doc, list):
        walls = [PlaneHessian.from_coefficients(w["normal"], w["d"]) for w in walls_doc]
    elif "distances" in walls_doc:
        walls = sim.wall_planes(T, walls_doc["distances"], walls_doc.get("yaw_deg", 0.0))
    else:
        walls = sim.random_wall_planes(
            T,
            run_seed,
            int(walls_doc.get("count", 50)),
            tuple(walls_doc.get("distance_range", (0.5, 4.5))),
            float(walls_doc.get("yaw_range_deg", 0.0)),
        )

    noise = doc.get("noise", {})
    quant = doc.get("quantization", {})
    config = sim.SimConfig(
        K,
        tuple(walls),
        T,
        (noise.get("a", 0.0007), noise.get("b", 0.0), noise.get("c", 0.002)),
        float(quant.get("step", 0.0)),
        float(quant.get("coeff", 0.0)),
        run_seed,
        float(doc.get("frame_interval", 0.1)),
    )

    field_doc = doc.get("bias_field", {})
    kind = field_doc.get("kind", "smooth")
    if kind == "smooth":
        truth = sim.smooth_bias_field(
            K,
            int(field_doc.get("seed", config_seed)),
            tuple(field_doc.get("a_range", (0.002, 0.006))),
            tuple(field_doc.get("b_range", (-0.01, 0.01))),
            tuple(field_doc.get("c_range", (-0.01, 0.01))),
            tuple(field_doc.get("depth_range", (0.5, 4.5))),
            float(field_doc.get("max_abs", 0.1)),
            field_doc.get("shape", "random"),
        )
    elif kind == "constant":
        from .error_model import PixelBias

        truth = sim.GroundTruthBiasField.constant(K, PixelBias(*field_doc.get("coefficients", (0.0, 0.0, 0.0))))
    else:
        raise CorruptFileError(f"{path}: unknown bias_field kind {kind!r}")
    return config, truth


def write_simulated_dataset(out_dir, config, truth, observations, frame_format: str = "png") -> Path:
    """Write frames, plane records, manifest and ground truth; returns the manifest path."""
    from .simulator import RNG_ALGORITHM

    out = Path(out_dir)
    records = []
    for i, (frame, plane) in enumerate(observations):
        frame_path = out / "frames" / f"{i:06d}.{frame_format}"
        write_depth_frame(frame_path, frame)
        records.append(FrameRecord(round(i * config.frame_interval, 9), frame_path, plane))
    na, nb, nc = config.noise
    metadata = {
        "generator": "depthcal.simulator",
        "rng": RNG_ALGORITHM,
        "seed": config.seed,
        "noise": {"a": na, "b": nb, "c": nc},
        "quantization": {"step": config.quantization_step, "coeff": config.quantization_coeff},
        "ground_truth": "ground_truth.dcal",
    }
    truth_file = CalibrationFile(
        truth.as_bias_map(),
        NoiseModel(na, nb, nc),
        {"kind": "ground_truth", "seed": config.seed},
    )
    write_calibration(out / "ground_truth.dcal", truth_file)
    dataset = Dataset(config.intrinsics, config.extrinsics, records, metadata)
    return write_manifest(out / "dataset.json", dataset)
