"""Command-line interface: ``depthcal simulate|calibrate|apply|evaluate``.

On failure the process exits with status 1 and prints one line to stderr::

    error: <Code>: <message>
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .calibration import (
    DEFAULT_MAX_RANGE,
    DEFAULT_MIN_PAIRS,
    DEFAULT_SPAN_MIN,
    OUTLIER_GATE,
    BinningConfig,
    calibrate,
)
from .error_model import compensate_frame
from .errors import DepthCalError
from .evaluation import bucket_records, evaluate_global, evaluate_local, wall_inlier_mask, write_eval_csv
from .formats import (
    CalibrationFile,
    atomic_write,
    load_manifest,
    load_sim_config,
    read_calibration,
    read_depth_frame,
    write_calibration,
    write_depth_frame,
)
from .geometry import transform_plane
from .scan import RansacParams

log = logging.getLogger("depthcal")


def parse_bins(text: str, bin_width: float | None) -> BinningConfig:
    """``START:STOP:STEP`` or a comma-separated list of bin centers."""
    kwargs = {}
    if bin_width is not None:
        kwargs["threshold"] = bin_width / 2.0
    if text is None:
        return BinningConfig(**kwargs)
    if ":" in text:
        start, stop, step = (float(v) for v in text.split(":"))
        config = BinningConfig.uniform(start, stop, step, **kwargs)
        if bin_width is None:
            config = BinningConfig(config.bin_centers, step / 2.0)
        return config
    return BinningConfig(tuple(float(v) for v in text.split(",")), **kwargs)


def _figures_enabled(args) -> bool:
    return not getattr(args, "no_figures", False)


def cmd_simulate(args) -> int:
    config, truth = load_sim_config(args.config, seed=args.seed)
    from .simulator import generate_dataset

    manifest = generate_dataset(config, truth, args.output, frame_format=args.frame_format)
    print(manifest)
    return 0


def cmd_calibrate(args) -> int:
    dataset = load_manifest(args.manifest, RansacParams(), seed=args.seed)
    binning = parse_bins(args.bins, args.bin_width)
    if args.min_bin_samples is not None:
        binning = BinningConfig(binning.bin_centers, binning.threshold, args.min_bin_samples, binning.ddof)
    result = calibrate(
        dataset.observations(),
        dataset.extrinsics,
        dataset.intrinsics,
        binning,
        min_pairs=args.min_pairs,
        span_min=DEFAULT_SPAN_MIN,
        max_range=args.max_range,
    )
    metadata = {
        "software": f"depthcal {__version__}",
        "dataset_sha256": dataset.content_hash(),
        "config": {
            "bin_centers": list(binning.bin_centers),
            "threshold": binning.threshold,
            "min_samples_per_bin": binning.min_samples_per_bin,
            "ddof": binning.ddof,
            "min_pairs": args.min_pairs,
            "span_min": DEFAULT_SPAN_MIN,
            "max_range": args.max_range,
            "outlier_gate": OUTLIER_GATE,
            "seed": args.seed,
        },
    }
    out = Path(args.output)
    write_calibration(out, CalibrationFile(result.bias_map, result.noise, metadata), args.format)

    report_path = Path(args.report) if args.report else out.with_name(out.name + ".report.json")
    report = dict(result.report, metadata=metadata)
    atomic_write(report_path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    if _figures_enabled(args):
        from .plotting import plot_bias_map, plot_noise_model

        plot_noise_model(result.noise, result.report["bins"], out.with_name(out.stem + "_noise.png"))
        plot_bias_map(result.bias_map, out.with_name(out.stem + "_bias.png"))
    log.info(
        "valid pixels %d, dropped %d, unobserved %d",
        result.report["valid_pixels"],
        result.report["dropped_pixels"],
        result.report["unobserved_pixels"],
    )
    print(out)
    return 0


def cmd_apply(args) -> int:
    cal = read_calibration(args.calibration)
    inputs = [Path(p) for p in args.frames]
    out = Path(args.output)
    single_file = len(inputs) == 1 and out.suffix != ""
    for path in inputs:
        frame = read_depth_frame(path)
        target = out if single_file else out / path.name
        write_depth_frame(target, compensate_frame(frame, cal.bias_map))
        print(target)
    return 0


def cmd_evaluate(args) -> int:
    cal = read_calibration(args.calibration)
    dataset = load_manifest(args.manifest, RansacParams(), seed=args.seed)
    K = dataset.intrinsics
    pairs, planes, masks = [], [], []
    for frame, plane in dataset.observations():
        plane_cam = transform_plane(plane, dataset.extrinsics)
        pairs.append((frame, compensate_frame(frame, cal.bias_map)))
        planes.append(plane_cam)
        masks.append(wall_inlier_mask(frame, plane_cam, K))
    if args.mode == "local":
        records = evaluate_local(pairs, K, masks)
    else:
        records = evaluate_global(pairs, planes, K, masks)
    buckets = bucket_records(records)
    out = write_eval_csv(args.output, buckets)
    if _figures_enabled(args):
        from .plotting import plot_eval_curves

        plot_eval_curves(buckets, out.with_suffix(".png"), f"{args.mode} error")
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthcal", description="Per-pixel depth bias calibration.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic wall dataset")
    p.add_argument("config", help="simulation config (JSON)")
    p.add_argument("--output", "-o", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the sequence seed")
    p.add_argument("--frame-format", choices=("png", "npy"), default="png")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="estimate per-pixel bias functions")
    p.add_argument("manifest", help="dataset.json")
    p.add_argument("--output", "-o", required=True, help="calibration file to write")
    p.add_argument("--format", choices=("binary", "json"), default="binary")
    p.add_argument("--bins", default=None, help="START:STOP:STEP or comma-separated bin centers [m]")
    p.add_argument("--bin-width", type=float, default=None, help="full bin width [m] (threshold = width/2)")
    p.add_argument("--min-pairs", type=int, default=DEFAULT_MIN_PAIRS)
    p.add_argument("--min-bin-samples", type=int, default=None)
    p.add_argument("--max-range", type=float, default=DEFAULT_MAX_RANGE)
    p.add_argument("--seed", type=int, default=0, help="seed for scan-based plane extraction")
    p.add_argument("--report", default=None, help="report JSON path (default: <output>.report.json)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("apply", help="compensate depth frames")
    p.add_argument("calibration")
    p.add_argument("frames", nargs="+")
    p.add_argument("--output", "-o", required=True, help="output file (single frame) or directory")
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("evaluate", help="RMS error curves before/after compensation")
    p.add_argument("calibration")
    p.add_argument("manifest")
    p.add_argument("--mode", choices=("local", "global"), default="local")
    p.add_argument("--output", "-o", required=True, help="CSV path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DepthCalError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {exc.code}: {msg}", file=sys.stderr)
    except (OSError, ValueError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
