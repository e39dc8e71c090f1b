"""``heatpose`` command line: thin bindings over the library.

Results go to stdout (or ``--out``) as JSON, logs go to stderr, and every
subcommand is deterministic for fixed inputs and seeds.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import pipeline
from .bench import time_decode
from .heatmap_codec import flip_fuse_ssp
from .metrics import evaluate
from .model import SkeletonSpec, aic_skeleton, coco_skeleton, load_skeleton
from .pipeline import (
    AlignmentTable,
    FormatError,
    align_skeleton,
    load_coco_json,
    load_detections,
    poses_from_results,
    poses_to_results,
    read_hmt,
    write_hmt,
)
from .pose_nms import NmsConfig, nms
from .subpixel import DecodeOptions, Refinement, decode_pose
from .synthetic import synth_stacks

log = logging.getLogger("heatpose")

REFINE_CHOICES = ("none", "quarter", "parabola", "paraboloid")


class CliError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _spec(arg: str | None, channels: int | None = None) -> SkeletonSpec:
    if arg in (None, "coco"):
        spec = coco_skeleton()
    else:
        spec = load_skeleton(arg)
    if channels is not None and channels != spec.num_keypoints:
        raise CliError(f"heatmaps have {channels} channels but skeleton {spec.name!r} has {spec.num_keypoints}")
    return spec


def _generic_spec(channels: int) -> SkeletonSpec:
    return SkeletonSpec("generic", [f"k{i}" for i in range(channels)], [1.0] * channels)


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON ({exc})") from None


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _decode_opts(args) -> DecodeOptions:
    sigma = args.gauss_sigma
    return DecodeOptions(Refinement.parse(args.refine), sigma > 0, sigma if sigma > 0 else 1.0,
                         paraboloid_weights=args.paraboloid_fit)


def _parallel_map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def _by_image(poses):
    groups: dict = {}
    for p in poses:
        groups.setdefault(p.image_id, []).append(p)
    return groups


# ------------------------------------------------------------ subcommands


def cmd_decode(args) -> None:
    stacks = read_hmt(args.heatmaps)
    boxes = load_detections(args.boxes)
    if len(boxes) != len(stacks):
        raise CliError(f"{len(stacks)} heatmap stacks but {len(boxes)} boxes")
    spec = _spec(args.spec, stacks.shape[1])
    flipped = None
    if args.flip_heatmaps:
        flipped = read_hmt(args.flip_heatmaps)
        if flipped.shape != stacks.shape:
            raise CliError(f"flipped heatmaps {flipped.shape} do not match {stacks.shape}")
    opts = _decode_opts(args)

    def one(n):
        h = stacks[n] if flipped is None else flip_fuse_ssp(stacks[n], flipped[n], args.ssp, spec)
        return decode_pose(h, boxes[n], opts, spec)

    poses = _parallel_map(one, list(range(len(stacks))), args.threads)
    _emit(poses_to_results(poses), args.out)


def cmd_eval(args) -> None:
    spec = _spec(args.spec)
    gt = load_coco_json(args.gt, spec.num_keypoints)
    preds = poses_from_results(_read_json(args.preds), spec.num_keypoints)
    report = evaluate(preds, gt.gt_poses, spec, image_ids=gt.images, ap_mode=args.ap_mode, convention=args.oks)
    _emit(report.to_json(), args.out)


def cmd_nms(args) -> None:
    spec = _spec(args.spec)
    poses = poses_from_results(_read_json(args.poses), spec.num_keypoints)
    cfg = NmsConfig(args.thr, args.mode, args.oks)
    kept = []
    for group in _by_image(poses).values():
        kept.extend(nms(group, cfg, spec))
    _emit(poses_to_results(kept), args.out)


def cmd_mine(args) -> None:
    gt = load_coco_json(args.gt)
    dets = load_detections(args.dets)
    kept = pipeline.mine_hard_negatives(dets, gt.gt_boxes(), args.thr)
    _emit(pipeline.detections_to_json(kept), args.out)


def cmd_screen(args) -> None:
    dets = load_detections(args.dets)
    thr = pipeline.screen_instance_threshold(dets, args.images, args.target_avg)
    kept = pipeline.screen_detections(dets, args.images, args.target_avg)
    _emit({"threshold": thr, "kept": len(kept), "per_image": len(kept) / args.images}, args.out)


def _named_spec(name: str, path: str | None) -> SkeletonSpec:
    if path:
        return load_skeleton(path)
    if name == "coco":
        return coco_skeleton()
    if name == "aic":
        # OKS constants are never used by alignment
        return aic_skeleton([1.0] * 14)
    raise CliError(f"no built-in skeleton named {name!r}; pass it explicitly")


def cmd_align(args) -> None:
    table_json = _read_json(args.table)
    try:
        src = _named_spec(table_json["source"], args.source_spec)
        dst = _named_spec(table_json["target"], args.target_spec)
        table = AlignmentTable(src, dst, tuple(tuple(p) for p in table_json["pairs"]))
    except KeyError as exc:
        raise FormatError(f"{args.table}: missing key {exc}") from None
    data = _read_json(args.poses)
    if isinstance(data, dict):
        aset = load_coco_json(args.poses, src.num_keypoints)
        poses = [align_skeleton(p, table) for p in aset.gt_poses]
        data = dict(data)
        data["annotations"] = [pipeline.pose_to_annotation(p, n + 1) for n, p in enumerate(poses)]
        _emit(data, args.out)
    else:
        poses = [align_skeleton(p, table) for p in poses_from_results(data, src.num_keypoints)]
        _emit(poses_to_results(poses), args.out)


def cmd_bench(args) -> None:
    stacks = read_hmt(args.heatmaps)
    spec = _spec(args.spec, stacks.shape[1]) if args.spec else (
        coco_skeleton() if stacks.shape[1] == 17 else _generic_spec(stacks.shape[1])
    )
    reports = []
    for mode in args.refine:
        opts = DecodeOptions(Refinement.parse(mode), args.gauss_sigma > 0, args.gauss_sigma or 1.0,
                             paraboloid_weights=args.paraboloid_fit)
        log.info("timing %s on %d instance(s) x %d repeats", mode, len(stacks), args.repeat)
        reports.append(time_decode(stacks, opts, spec, repeat=args.repeat, warmup=args.warmup, threads=args.threads))
    _emit({"results": reports}, args.out)


def cmd_synth(args) -> None:
    try:
        dims = tuple(int(v) for v in args.dims.split(","))
    except ValueError:
        raise CliError(f"--dims must look like C,H,W, got {args.dims!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise CliError(f"--dims must be three positive integers, got {args.dims!r}")
    stacks, centers = synth_stacks(args.count, dims, args.sigma, args.noise, args.seed)
    write_hmt(args.out, stacks.astype(np.float32))
    _, h, w = dims
    box = {"bbox": [0.0, 0.0, w * args.stride, h * args.stride], "score": 1.0, "category_id": 1}
    truth = {
        "dims": list(dims),
        "sigma": args.sigma,
        "noise": args.noise,
        "seed": args.seed,
        "stride": args.stride,
        "centers": centers.tolist(),
        "boxes": [dict(box, image_id=n) for n in range(args.count)],
    }
    _emit(truth, args.gt)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="heatpose", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, threads=False):
        p.add_argument("--out", help="write JSON here instead of stdout")
        if threads:
            p.add_argument("--threads", type=int, default=os.cpu_count() or 1)

    p = sub.add_parser("decode", help="heatmaps + boxes -> COCO keypoint results")
    p.add_argument("--heatmaps", required=True)
    p.add_argument("--boxes", required=True, help="detections JSON, one per heatmap stack")
    p.add_argument("--refine", choices=REFINE_CHOICES, default="parabola")
    p.add_argument("--gauss-sigma", type=float, default=0.0, help="Gaussian filter sigma; 0 disables")
    p.add_argument("--paraboloid-fit", choices=("uniform", "binomial"), default="uniform",
                   help="3x3 paraboloid fit: ordinary least squares or the 1-2-1 weighted stencil")
    p.add_argument("--ssp", type=float, default=1.0, help="sub-pixel shift for the flipped heatmaps, in [0, 1]")
    p.add_argument("--flip-heatmaps", help="HMT of the network output on mirrored crops")
    p.add_argument("--spec", help="skeleton JSON (default: bundled COCO)")
    common(p, threads=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="OKS AP/AR of predictions against ground truth")
    p.add_argument("--preds", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--spec")
    p.add_argument("--ap-mode", choices=("ratio", "coco101"), default="ratio")
    p.add_argument("--oks", choices=("coco", "literal"), default="coco")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("nms", help="OKS NMS over predicted poses, per image")
    p.add_argument("--poses", required=True)
    p.add_argument("--mode", choices=("hard", "soft"), default="hard")
    p.add_argument("--thr", type=float, default=0.9)
    p.add_argument("--oks", choices=("coco", "literal"), default="coco")
    p.add_argument("--spec")
    common(p)
    p.set_defaults(func=cmd_nms)

    p = sub.add_parser("mine", help="hard-negative detections (confident, no gt overlap)")
    p.add_argument("--dets", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--thr", type=float, default=0.5)
    common(p)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("screen", help="score threshold for a target number of instances per image")
    p.add_argument("--dets", required=True)
    p.add_argument("--images", type=int, required=True)
    p.add_argument("--target-avg", type=float, required=True)
    common(p)
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("align", help="map poses between skeletons with an alignment table")
    p.add_argument("--poses", required=True, help="COCO keypoints file or results list")
    p.add_argument("--table", required=True)
    p.add_argument("--source-spec")
    p.add_argument("--target-spec")
    common(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("bench", help="time the heatmap -> coordinate stage")
    p.add_argument("--heatmaps", required=True)
    p.add_argument("--refine", nargs="+", choices=REFINE_CHOICES, default=["parabola"])
    p.add_argument("--repeat", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=20)
    p.add_argument("--gauss-sigma", type=float, default=1.0, help="0 disables filtering")
    p.add_argument("--paraboloid-fit", choices=("uniform", "binomial"), default="uniform")
    p.add_argument("--spec")
    common(p, threads=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="seeded synthetic heatmaps with exact peak centres")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--dims", required=True, help="C,H,W")
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stride", type=float, default=4.0, help="stride used for the emitted identity boxes")
    p.add_argument("--out", required=True, help="HMT output path")
    p.add_argument("--gt", help="ground-truth JSON path (default stdout)")
    p.set_defaults(func=cmd_synth)
    return parser


def _validate(args) -> None:
    if getattr(args, "threads", 1) < 1:
        raise CliError("--threads must be >= 1")
    if args.command == "decode" and not 0.0 <= args.ssp <= 1.0:
        raise CliError("--ssp must lie in [0, 1]")
    if args.command == "bench" and args.repeat < 1:
        raise CliError("--repeat must be >= 1")
    if args.command in ("nms",) and not 0.0 < args.thr < 1.0:
        raise CliError("--thr must lie in (0, 1)")
    if args.command == "mine" and not 0.0 <= args.thr <= 1.0:
        raise CliError("--thr must lie in [0, 1]")
    if args.command == "screen" and (args.images < 1 or args.target_avg <= 0):
        raise CliError("--images must be >= 1 and --target-avg > 0")
    if args.command == "synth" and args.count < 0:
        raise CliError("--count must be >= 0")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        _validate(args)
        args.func(args)
    except (CliError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
