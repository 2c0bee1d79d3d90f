"""``planeseg`` command line entry point.

Exit codes: 0 success, 2 I/O failure, 64 bad configuration or usage,
70 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .assembly import assemble, binarize, crop_mask
from .bench import bench_nms
from .dataset_io import (
    Annotation,
    DetectionFile,
    load_annotation,
    load_depth,
    load_intrinsics,
    read_detections,
    read_tensor,
    save_annotation,
    write_detections,
    write_ply,
    write_tensor,
)
from .errors import ConfigurationError, DatasetIOError, PlaneSegError
from .geometry import unproject
from .metrics import INTERPOLATIONS, FrameStats, evaluate_frames, frame_stats, instances_from_labels
from .ndt_ransac import NdtRansacConfig, annotate_cloud
from .nms import NmsConfig, ff_nms
from .rfa import RfaConfig

log = logging.getLogger("planeseg")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_INTERNAL = 0, 2, 64, 70


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError("config file must hold a JSON object")
    unknown = set(data) - {"ndt", "nms", "rfa", "metrics", "seed", "jobs"}
    if unknown:
        raise ConfigurationError(f"unknown config sections {sorted(unknown)}")
    if "rfa" in data:
        try:
            RfaConfig(**data["rfa"])
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc
    return data


def _build(cls, base: dict, args: argparse.Namespace, prefix: str = ""):
    """Instantiate ``cls`` from a config-file section, then flag overrides."""
    names = {f.name for f in fields(cls)}
    unknown = set(base) - names
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    values = dict(base)
    for name in names:
        v = getattr(args, prefix + name, None)
        if v is not None:
            values[name] = v
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def _ndt_config(args, file_cfg) -> NdtRansacConfig:
    cfg = _build(NdtRansacConfig, file_cfg.get("ndt", {}), args)
    seed = args.seed if args.seed is not None else file_cfg.get("seed")
    return cfg if seed is None else replace(cfg, rng_seed=int(seed))


def _nms_config(args, file_cfg) -> NmsConfig:
    return _build(NmsConfig, file_cfg.get("nms", {}), args)


def _jobs(args, file_cfg) -> int:
    jobs = args.jobs if args.jobs is not None else file_cfg.get("jobs", os.cpu_count() or 1)
    if int(jobs) < 1:
        raise ConfigurationError("--jobs must be >= 1")
    return int(jobs)


def _annotate_one(depth_path: str, intr, cfg: NdtRansacConfig, out_dir: str,
                  intrinsics_ref: str) -> dict:
    try:
        depth = load_depth(depth_path)
        cloud = unproject(depth, intr)
        labels, planes = annotate_cloud(cloud, intr, cfg)
        ann = Annotation.from_labels(labels, planes, meta={
            "source": Path(depth_path).name,
            "intrinsics": intrinsics_ref,
        })
        save_annotation(ann, Path(out_dir) / Path(depth_path).stem)
        return {"frame": Path(depth_path).name, "planes": len(planes)}
    except PlaneSegError as exc:
        return {"frame": Path(depth_path).name, "error": str(exc), "exit_code": exc.exit_code}


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *it) for it in items]
        return [f.result() for f in futures]


def cmd_annotate(args, file_cfg) -> int:
    cfg = _ndt_config(args, file_cfg)
    intr = load_intrinsics(args.intrinsics)
    depth_dir = Path(args.depth_dir)
    if not depth_dir.is_dir():
        raise DatasetIOError(f"not a directory: {depth_dir}")
    frames = sorted(depth_dir.glob("*.png"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not frames:
        log.warning("no depth frames found in %s", depth_dir)
        print("annotated 0 frames")
        return EXIT_OK
    items = [(str(p), intr, cfg, str(out), Path(args.intrinsics).name) for p in frames]
    results = _map(_annotate_one, items, _jobs(args, file_cfg))
    failed = [r for r in results if "error" in r]
    for r in results:
        if "error" not in r:
            log.info("%s: %d planes", r["frame"], r["planes"])
    planes = sum(r.get("planes", 0) for r in results)
    print(f"annotated {len(results) - len(failed)}/{len(results)} frames, {planes} plane instances")
    if failed:
        (out / "errors.json").write_text(json.dumps(failed, indent=2) + "\n")
        for r in failed:
            log.error("%s: %s", r["frame"], r["error"])
        return max(r["exit_code"] for r in failed)
    return EXIT_OK


def _annotation_stems(directory: Path) -> list:
    if not directory.is_dir():
        raise DatasetIOError(f"not a directory: {directory}")
    return sorted(p.stem for p in directory.glob("*.json") if p.with_suffix(".png").is_file())


def cmd_eval(args, file_cfg) -> int:
    metric_cfg = file_cfg.get("metrics", {})
    iou = args.iou_thresh if args.iou_thresh is not None else metric_cfg.get("iou_thresh", 0.5)
    interp = args.interpolation or metric_cfg.get("interpolation", "all")
    if interp not in INTERPOLATIONS:
        raise ConfigurationError(f"interpolation must be one of {INTERPOLATIONS}")
    if not 0 < float(iou) <= 1:
        raise ConfigurationError("iou threshold must lie in (0, 1]")
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    gt_stems = _annotation_stems(gt_dir)
    pred_stems = set(_annotation_stems(pred_dir))
    frames = []
    for stem in gt_stems:
        gt = load_annotation(gt_dir / stem)
        if stem in pred_stems:
            pred = load_annotation(pred_dir / stem)
            pred_labels, scores = pred.labels, pred.scores
        else:
            log.warning("no prediction for %s; scoring an empty map", stem)
            pred_labels, scores = np.zeros_like(gt.labels), {}
        if pred_labels.shape != gt.labels.shape:
            raise ConfigurationError(f"{stem}: prediction and ground truth sizes differ")
        frames.append((stem, pred_labels, scores, gt.labels))
    report = evaluate_frames(frames, float(iou), interp)
    if args.out:
        Path(args.out).write_text(report.to_json())
    if args.text:
        Path(args.text).write_text(report.to_text())
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_stats(args, file_cfg) -> int:
    ann_dir = Path(args.ann_dir)
    total = FrameStats()
    for stem in _annotation_stems(ann_dir):
        ann = load_annotation(ann_dir / stem)
        total = total.merge(frame_stats(instances_from_labels(ann.labels), ann.labels.size))
    text = json.dumps({**total.report().to_dict(), "frames": total.frames}, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_nms_filter(args, file_cfg) -> int:
    cfg = _nms_config(args, file_cfg)
    dfile = read_detections(args.input)
    kept = ff_nms(dfile.detections, cfg)
    write_detections(args.output, DetectionFile(kept, dfile.k, dfile.image_size))
    print(f"kept {len(kept)}/{len(dfile.detections)} detections")
    return EXIT_OK


def cmd_assemble(args, file_cfg) -> int:
    prototypes = read_tensor(args.prototypes)
    dfile = read_detections(args.detections)
    coeffs = np.array([d.coeffs for d in dfile.detections]).reshape(len(dfile.detections), -1)
    if prototypes.ndim != 3:
        raise ConfigurationError(f"prototypes must be (h, w, k), got shape {prototypes.shape}")
    if dfile.detections and coeffs.shape[1] != prototypes.shape[2]:
        raise ConfigurationError(f"detections carry k={coeffs.shape[1]}, prototypes k={prototypes.shape[2]}")
    if not dfile.detections:
        coeffs = np.zeros((0, prototypes.shape[2]))
    masks = assemble(prototypes, coeffs)
    if args.crop:
        masks = np.stack([crop_mask(m, d.box) for m, d in zip(masks, dfile.detections)]) if len(masks) else masks
    if args.binarize is not None:
        masks = binarize(masks, args.binarize).astype(np.float32)
    write_tensor(args.out, masks)
    print(f"assembled {len(masks)} masks of size {prototypes.shape[0]}x{prototypes.shape[1]}")
    return EXIT_OK


def cmd_export_ply(args, file_cfg) -> int:
    intr = load_intrinsics(args.intrinsics)
    cloud = unproject(load_depth(args.depth), intr)
    labels = None
    if args.annotation:
        ann = load_annotation(args.annotation)
        if ann.labels.shape != (intr.height, intr.width):
            raise ConfigurationError("annotation size does not match intrinsics")
        labels = ann.labels[cloud.pixels[:, 0], cloud.pixels[:, 1]]
    write_ply(args.out, cloud.points, labels)
    print(f"wrote {len(cloud)} points to {args.out}")
    return EXIT_OK


def cmd_bench_nms(args, file_cfg) -> int:
    cfg = _nms_config(args, file_cfg)
    if args.n < 1 or args.k < 1 or args.trials < 1:
        raise ConfigurationError("--n, --k and --trials must be >= 1")
    seed = args.seed if args.seed is not None else file_cfg.get("seed", 0)
    report = bench_nms(args.n, args.k, args.trials, cfg, seed=int(seed))
    text = json.dumps(report.to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _add_ndt_flags(p):
    g = p.add_argument_group("NDT-RANSAC")
    g.add_argument("--cell-size", dest="cell_size", type=float)
    g.add_argument("--min-points-per-cell", dest="min_points_per_cell", type=int)
    g.add_argument("--planarity-ratio", dest="planarity_ratio", type=float)
    g.add_argument("--ransac-iters", dest="ransac_iters", type=int)
    g.add_argument("--dist-thresh", dest="dist_thresh", type=float, help="meters")
    g.add_argument("--angle-thresh", dest="angle_thresh", type=float, help="degrees")
    g.add_argument("--min-inlier-cells", dest="min_inlier_cells", type=int)
    g.add_argument("--min-mask-area", dest="min_mask_area", type=float, help="fraction of the frame")
    g.add_argument("--max-normal-spread", dest="max_normal_spread", type=float, help="degrees")


def _add_nms_flags(p):
    g = p.add_argument_group("NMS")
    g.add_argument("--n1", type=float, help="IoU keep threshold")
    g.add_argument("--n2", type=float, help="IoU suppress threshold")
    g.add_argument("--sim-thresh", dest="t", type=float, help="cosine similarity threshold")
    g.add_argument("--top-n", dest="top_n", type=int)
    g.add_argument("--score-thresh", dest="score_thresh", type=float)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="worker processes (default: CPU count)")
    common.add_argument("--config", help="JSON file with ndt/nms/metrics sections; flags win")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="planeseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"planeseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("annotate", parents=[common], help="NDT-RANSAC plane annotation of depth frames")
    p.add_argument("depth_dir")
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True)
    _add_ndt_flags(p)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("stats", parents=[common], help="overlap / IoU-band / large-object statistics")
    p.add_argument("ann_dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("nms-filter", parents=[common], help="Fast Feature NMS over a detection file")
    p.add_argument("input")
    p.add_argument("output")
    _add_nms_flags(p)
    p.set_defaults(func=cmd_nms_filter)

    p = sub.add_parser("eval", parents=[common], help="AP^b, AP^m, VOI, RI, SC report")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--iou-thresh", dest="iou_thresh", type=float)
    p.add_argument("--interpolation", choices=INTERPOLATIONS)
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--text", help="plain-text table path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("assemble", parents=[common], help="prototype x coefficient mask assembly")
    p.add_argument("--prototypes", required=True, help="raw tensor (h, w, k)")
    p.add_argument("--detections", required=True)
    p.add_argument("--out", required=True, help="raw tensor (n, h, w)")
    p.add_argument("--crop", action="store_true", help="zero pixels outside each box")
    p.add_argument("--binarize", type=float, metavar="THRESH")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("export-ply", parents=[common], help="colored point cloud for inspection")
    p.add_argument("--depth", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--annotation")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_ply)

    p = sub.add_parser("bench-nms", parents=[common], help="time Fast NMS vs Fast Feature NMS")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--k", type=int, default=32)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--out")
    _add_nms_flags(p)
    p.set_defaults(func=cmd_bench_nms)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        file_cfg = _load_config_file(args.config)
        return args.func(args, file_cfg)
    except PlaneSegError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
