"""Data preparation: COCO-style JSON, detection filtering, label alignment, HMT files."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import (
    DetectionBox,
    DimensionError,
    Pose,
    SkeletonSpec,
    Visibility,
    box_intersects,
    validate_pose,
)

__all__ = [
    "FormatError",
    "ImageInfo",
    "AnnotationSet",
    "AlignmentTable",
    "load_coco_json",
    "write_coco_json",
    "load_detections",
    "detections_to_json",
    "pose_from_annotation",
    "pose_to_annotation",
    "poses_from_results",
    "poses_to_results",
    "mine_hard_negatives",
    "screen_instance_threshold",
    "screen_detections",
    "screen_keypoint_pseudolabels",
    "align_skeleton",
    "load_alignment_table",
    "aic_to_coco_pairs",
    "HMT_MAGIC",
    "write_hmt",
    "read_hmt",
    "encode_hmt",
    "decode_hmt",
]


class FormatError(ValueError):
    """A file does not follow the expected layout."""


@dataclass(frozen=True)
class ImageInfo:
    width: int
    height: int
    file_name: str = ""


@dataclass
class AnnotationSet:
    images: dict = field(default_factory=dict)  # image_id -> ImageInfo
    gt_poses: list[Pose] = field(default_factory=list)
    detections: list[DetectionBox] = field(default_factory=list)

    def __post_init__(self):
        missing = {p.image_id for p in self.gt_poses} - set(self.images)
        if missing:
            raise ValueError(f"poses refer to unknown images {sorted(map(str, missing))}")

    def gt_boxes(self) -> dict:
        """image_id -> list of ground-truth boxes (annotations without a bbox are skipped)."""
        out: dict = {i: [] for i in self.images}
        for p in self.gt_poses:
            if p.bbox is not None and p.bbox[2] > 0 and p.bbox[3] > 0:
                out[p.image_id].append(DetectionBox(*p.bbox, image_id=p.image_id))
        return out


# ------------------------------------------------------------- COCO JSON


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON ({exc})") from None


def _triples(flat, num_keypoints: int | None, what: str) -> np.ndarray:
    arr = np.asarray(flat, dtype=np.float64)
    if arr.ndim != 1 or arr.size % 3:
        raise FormatError(f"{what}: keypoints length {arr.size} is not a multiple of 3")
    if num_keypoints is not None and arr.size != 3 * num_keypoints:
        raise FormatError(f"{what}: expected {3 * num_keypoints} keypoint values, got {arr.size}")
    return arr.reshape(-1, 3)


def pose_from_annotation(ann: Mapping, num_keypoints: int | None = None) -> Pose:
    """Ground-truth pose from one COCO ``annotations`` entry."""
    what = f"annotation {ann.get('id', '?')}"
    try:
        kps = _triples(ann["keypoints"], num_keypoints, what)
        image_id = ann["image_id"]
    except KeyError as exc:
        raise FormatError(f"{what}: missing field {exc}") from None
    vis = kps[:, 2]
    if not np.isin(vis, (0, 1, 2)).all():
        raise FormatError(f"{what}: visibility flags must be 0, 1 or 2")
    bbox = ann.get("bbox")
    return Pose(
        xy=kps[:, :2],
        visibility=vis.astype(np.int64),
        area=float(ann.get("area", 0.0)),
        image_id=image_id,
        bbox=tuple(bbox) if bbox is not None else None,
    )


def pose_to_annotation(pose: Pose, ann_id: int) -> dict:
    flat = np.column_stack([pose.xy, pose.visibility]).ravel()
    out = {
        "id": ann_id,
        "image_id": pose.image_id,
        "category_id": 1,
        "keypoints": [float(v) if i % 3 < 2 else int(v) for i, v in enumerate(flat)],
        "num_keypoints": int((pose.visibility > 0).sum()),
        "area": pose.area,
        "iscrowd": 0,
    }
    if pose.bbox is not None:
        out["bbox"] = list(pose.bbox)
    return out


def _box_from_json(obj: Mapping, what: str) -> DetectionBox:
    try:
        x, y, w, h = obj["bbox"]
        return DetectionBox(x, y, w, h, float(obj.get("score", 1.0)), obj["image_id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{what}: bad detection ({exc})") from None


def load_detections(path) -> list[DetectionBox]:
    """Detections file: a JSON list of ``{"image_id", "bbox": [x, y, w, h], "score"}``."""
    data = _read_json(path)
    if not isinstance(data, list):
        raise FormatError(f"{path}: detections file must hold a JSON list")
    return [_box_from_json(d, f"{path}[{i}]") for i, d in enumerate(data)]


def detections_to_json(dets: Iterable[DetectionBox]) -> list[dict]:
    return [
        {"image_id": d.image_id, "category_id": 1, "bbox": [d.x, d.y, d.w, d.h], "score": d.score}
        for d in dets
    ]


def load_coco_json(path, num_keypoints: int | None = None, detections=None) -> AnnotationSet:
    """Parse a COCO keypoints file (``images`` + ``annotations``).

    ``detections`` may name a separate detections file. A ``"detections"`` list
    inside the main file is read as well.
    """
    data = _read_json(path)
    if not isinstance(data, dict):
        raise FormatError(f"{path}: expected a JSON object with 'images' and 'annotations'")
    try:
        images = {
            im["id"]: ImageInfo(int(im.get("width", 0)), int(im.get("height", 0)), im.get("file_name", ""))
            for im in data.get("images", [])
        }
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad image entry ({exc})") from None
    poses = [pose_from_annotation(a, num_keypoints) for a in data.get("annotations", [])]
    dets = [_box_from_json(d, f"{path} detections[{i}]") for i, d in enumerate(data.get("detections", []))]
    if detections is not None:
        dets.extend(load_detections(detections))
    try:
        return AnnotationSet(images, poses, dets)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_coco_json(aset: AnnotationSet, path, detections_path=None) -> None:
    """Write ``aset`` back out; detections go to ``detections_path`` or inline."""
    data = {
        "images": [
            {"id": i, "width": info.width, "height": info.height, "file_name": info.file_name}
            for i, info in aset.images.items()
        ],
        "annotations": [pose_to_annotation(p, n + 1) for n, p in enumerate(aset.gt_poses)],
        "categories": [{"id": 1, "name": "person"}],
    }
    dets = detections_to_json(aset.detections)
    if detections_path is not None:
        Path(detections_path).write_text(json.dumps(dets), encoding="utf-8")
    elif dets:
        data["detections"] = dets
    Path(path).write_text(json.dumps(data), encoding="utf-8")


def poses_to_results(poses: Iterable[Pose]) -> list[dict]:
    """COCO results layout: one entry per predicted pose."""
    out = []
    for p in poses:
        flat = np.column_stack([p.xy, p.scores]).ravel()
        entry = {
            "image_id": p.image_id,
            "category_id": 1,
            "keypoints": [float(v) for v in flat],
            "score": p.instance_score,
        }
        if p.area > 0:
            entry["area"] = p.area
        if p.bbox is not None:
            entry["bbox"] = list(p.bbox)
        out.append(entry)
    return out


def poses_from_results(data: Sequence[Mapping], num_keypoints: int | None = None) -> list[Pose]:
    """Inverse of :func:`poses_to_results`; area falls back to the bbox area."""
    out = []
    for i, r in enumerate(data):
        what = f"result {i}"
        try:
            kps = _triples(r["keypoints"], num_keypoints, what)
            bbox = r.get("bbox")
            area = r.get("area", bbox[2] * bbox[3] if bbox else 0.0)
            out.append(
                Pose(
                    xy=kps[:, :2],
                    scores=kps[:, 2],
                    instance_score=float(r.get("score", 1.0)),
                    area=float(area),
                    image_id=r["image_id"],
                    bbox=tuple(bbox) if bbox is not None else None,
                )
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{what}: {exc}") from None
    return out


# ------------------------------------------------- data-preparation filters


def mine_hard_negatives(
    dets: Iterable[DetectionBox], gt_boxes: Mapping, score_thr: float = 0.5
) -> list[DetectionBox]:
    """Confident detections that overlap no ground-truth box of their image.

    ``gt_boxes`` maps image_id to that image's ground-truth boxes. Crops of the
    returned boxes are meant to be trained against all-zero heatmaps.
    """
    if not 0.0 <= score_thr <= 1.0:
        raise ValueError("score threshold must lie in [0, 1]")
    return [
        d
        for d in dets
        if d.score >= score_thr and not any(box_intersects(d, g) for g in gt_boxes.get(d.image_id, ()))
    ]


def _screen_cut(dets, num_images: int, target_avg: float):
    if not dets:
        raise ValueError("no detections to screen")
    if not target_avg > 0:
        raise ValueError("target_avg must be > 0")
    if num_images < 1:
        raise ValueError("num_images must be >= 1")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    cap = math.floor(target_avg * num_images + 1e-9)
    return order, cap


def screen_instance_threshold(dets: Sequence[DetectionBox], num_images: int, target_avg: float) -> float:
    """Score threshold that leaves about ``target_avg`` detections per image.

    Scores are ranked and cut after ``floor(target_avg * num_images)`` entries;
    the threshold is the lowest kept score, or 0 when everything fits.
    """
    order, cap = _screen_cut(dets, num_images, target_avg)
    if cap >= len(dets):
        return 0.0
    if cap == 0:
        return math.nextafter(dets[order[0]].score, math.inf)
    return dets[order[cap - 1]].score


def screen_detections(dets: Sequence[DetectionBox], num_images: int, target_avg: float) -> list[DetectionBox]:
    """The detections kept by the rank cut of :func:`screen_instance_threshold`.

    Equal scores straddling the cut are resolved by input order, so the count is
    exactly the cap.
    """
    order, cap = _screen_cut(dets, num_images, target_avg)
    keep = sorted(order[:cap])
    return [dets[i] for i in keep]


def screen_keypoint_pseudolabels(poses: Iterable[Pose], kp_score_thr: float = 0.9) -> list[Pose]:
    """Turn predictions into pseudo ground truth.

    Keypoints scoring above the threshold become labeled-visible, the rest
    unlabeled; poses with nothing left are dropped.
    """
    if not 0.0 <= kp_score_thr <= 1.0:
        raise ValueError("keypoint threshold must lie in [0, 1]")
    out = []
    for p in poses:
        keep = p.scores > kp_score_thr
        if keep.any():
            vis = np.where(keep, int(Visibility.VISIBLE), int(Visibility.UNLABELED))
            out.append(p.replace(visibility=vis))
    return out


@dataclass(frozen=True)
class AlignmentTable:
    source_spec: SkeletonSpec
    target_spec: SkeletonSpec
    index_map: tuple[tuple[int, int], ...]

    def __post_init__(self):
        pairs = tuple((int(s), int(t)) for s, t in self.index_map)
        object.__setattr__(self, "index_map", pairs)
        src = [s for s, _ in pairs]
        dst = [t for _, t in pairs]
        if len(set(src)) != len(src) or len(set(dst)) != len(dst):
            raise ValueError("alignment table must be one-to-one")
        if any(not 0 <= s < self.source_spec.num_keypoints for s in src):
            raise ValueError("source index out of range")
        if any(not 0 <= t < self.target_spec.num_keypoints for t in dst):
            raise ValueError("target index out of range")

    def reversed(self) -> "AlignmentTable":
        return AlignmentTable(self.target_spec, self.source_spec, tuple((t, s) for s, t in self.index_map))


def aic_to_coco_pairs() -> tuple[tuple[int, int], ...]:
    """The bundled AIC -> COCO index pairs for the 12 shared limb keypoints."""
    text = resources.files("heatpose").joinpath("data/aic_to_coco.json").read_text("utf-8")
    return tuple(tuple(p) for p in json.loads(text)["pairs"])


def load_alignment_table(path, source_spec: SkeletonSpec, target_spec: SkeletonSpec) -> AlignmentTable:
    """Alignment file: ``{"source": name, "target": name, "pairs": [[s, t], ...]}``."""
    data = _read_json(path)
    try:
        if data["source"] != source_spec.name or data["target"] != target_spec.name:
            raise FormatError(
                f"{path}: table maps {data['source']} -> {data['target']}, "
                f"not {source_spec.name} -> {target_spec.name}"
            )
        return AlignmentTable(source_spec, target_spec, tuple(tuple(p) for p in data["pairs"]))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad alignment table ({exc})") from None


def align_skeleton(pose: Pose, table: AlignmentTable) -> Pose:
    """Re-express ``pose`` in the table's target skeleton.

    Mapped keypoints keep coordinates, score and visibility; target keypoints
    without a source are unlabeled at (0, 0).
    """
    validate_pose(pose, table.source_spec)
    k = table.target_spec.num_keypoints
    xy = np.zeros((k, 2))
    scores = np.zeros(k)
    vis = np.zeros(k, dtype=np.int64)
    for s, t in table.index_map:
        xy[t] = pose.xy[s]
        scores[t] = pose.scores[s]
        vis[t] = pose.visibility[s]
    return pose.replace(xy=xy, scores=scores, visibility=vis)


# ------------------------------------------------------------- HMT files

HMT_MAGIC = b"HMT1"
_HMT_HEADER = struct.Struct("<4s4I")


def encode_hmt(stacks) -> bytes:
    """Serialize ``(N, C, H, W)`` (or a single ``(C, H, W)``) stack as HMT bytes."""
    arr = np.asarray(stacks)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or min(arr.shape) < 1:
        raise DimensionError(f"HMT needs a non-empty (N, C, H, W) array, got {arr.shape}")
    header = _HMT_HEADER.pack(HMT_MAGIC, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_hmt(buf: bytes) -> np.ndarray:
    if len(buf) < _HMT_HEADER.size:
        raise FormatError("HMT data shorter than its header")
    magic, n, c, h, w = _HMT_HEADER.unpack_from(buf)
    if magic != HMT_MAGIC:
        raise FormatError(f"bad HMT magic {magic!r}")
    count = n * c * h * w
    expected = _HMT_HEADER.size + 4 * count
    if len(buf) != expected:
        raise FormatError(f"HMT payload is {len(buf) - _HMT_HEADER.size} bytes, expected {4 * count}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=_HMT_HEADER.size)
    return data.reshape(n, c, h, w).astype(np.float32)


def write_hmt(path, stacks) -> None:
    Path(path).write_bytes(encode_hmt(stacks))


def read_hmt(path) -> np.ndarray:
    """Load an HMT file as a float32 ``(N, C, H, W)`` array."""
    return decode_hmt(Path(path).read_bytes())
