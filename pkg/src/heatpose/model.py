"""Domain types shared by the whole pipeline: skeletons, keypoints, poses, boxes."""

from __future__ import annotations

import dataclasses
import enum
import functools
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Visibility",
    "SkeletonSpec",
    "Keypoint",
    "Pose",
    "DetectionBox",
    "validate_pose",
    "box_intersects",
    "load_skeleton",
    "coco_skeleton",
    "aic_skeleton",
    "AIC_KEYPOINTS",
    "AIC_FLIP_PAIRS",
]


class DimensionError(ValueError):
    """Raised when array shapes or keypoint counts disagree."""


class Visibility(enum.IntEnum):
    UNLABELED = 0
    INVISIBLE = 1
    VISIBLE = 2


@dataclass(frozen=True)
class SkeletonSpec:
    """Keypoint layout of a dataset.

    ``oks_k`` holds the per-keypoint falloff constants used by OKS (0.026 for the
    COCO nose, etc). ``flip_pairs`` lists (left, right) channel indices that trade
    places when an image is mirrored.
    """

    name: str
    keypoint_names: tuple[str, ...]
    oks_k: tuple[float, ...]
    flip_pairs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "keypoint_names", tuple(str(n) for n in self.keypoint_names))
        object.__setattr__(self, "oks_k", tuple(float(s) for s in self.oks_k))
        object.__setattr__(
            self, "flip_pairs", tuple((int(a), int(b)) for a, b in self.flip_pairs)
        )
        k = len(self.keypoint_names)
        if k < 1:
            raise ValueError("skeleton needs at least one keypoint")
        if len(self.oks_k) != k:
            raise DimensionError(f"oks_k has {len(self.oks_k)} entries, expected {k}")
        if not all(math.isfinite(s) and s > 0 for s in self.oks_k):
            raise ValueError("every oks_k constant must be finite and > 0")
        seen: set[int] = set()
        for a, b in self.flip_pairs:
            if a == b:
                raise ValueError(f"flip pair ({a}, {b}) maps a keypoint onto itself")
            for idx in (a, b):
                if not 0 <= idx < k:
                    raise ValueError(f"flip pair index {idx} out of range for K={k}")
                if idx in seen:
                    raise ValueError(f"keypoint {idx} appears in more than one flip pair")
                seen.add(idx)

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoint_names)

    @property
    def sigmas(self) -> np.ndarray:
        return np.asarray(self.oks_k, dtype=np.float64)

    def flip_permutation(self) -> np.ndarray:
        """Channel permutation that swaps every left/right pair."""
        perm = np.arange(self.num_keypoints)
        for a, b in self.flip_pairs:
            perm[a], perm[b] = b, a
        return perm

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "keypoints": list(self.keypoint_names),
            "oks_k": list(self.oks_k),
            "flip_pairs": [list(p) for p in self.flip_pairs],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SkeletonSpec":
        try:
            return cls(
                name=obj["name"],
                keypoint_names=obj["keypoints"],
                oks_k=obj["oks_k"],
                flip_pairs=obj.get("flip_pairs", []),
            )
        except KeyError as exc:
            raise ValueError(f"skeleton file is missing key {exc}") from None


def load_skeleton(path: str | Path) -> SkeletonSpec:
    with open(path, encoding="utf-8") as fh:
        return SkeletonSpec.from_json(json.load(fh))


@functools.cache
def coco_skeleton() -> SkeletonSpec:
    """The 17-keypoint COCO skeleton with the standard COCO OKS constants."""
    text = resources.files("heatpose").joinpath("data/coco_skeleton.json").read_text("utf-8")
    return SkeletonSpec.from_json(json.loads(text))


AIC_KEYPOINTS = (
    "right_shoulder", "right_elbow", "right_wrist",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_hip", "right_knee", "right_ankle",
    "left_hip", "left_knee", "left_ankle",
    "head_top", "neck",
)
AIC_FLIP_PAIRS = ((0, 3), (1, 4), (2, 5), (6, 9), (7, 10), (8, 11))


def aic_skeleton(oks_k: Sequence[float]) -> SkeletonSpec:
    """AI Challenger 14-keypoint skeleton.

    There is no agreed set of OKS constants for this layout, so the caller has to
    supply all 14.
    """
    return SkeletonSpec("aic", AIC_KEYPOINTS, tuple(oks_k), AIC_FLIP_PAIRS)


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float = 0.0
    visibility: Visibility = Visibility.UNLABELED


def _frozen(arr, dtype, shape_tail: tuple[int, ...], what: str) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    if out.ndim != 1 + len(shape_tail) or out.shape[1:] != shape_tail:
        raise DimensionError(f"{what} has shape {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Pose:
    """One person instance.

    Coordinates are stored as a ``(K, 2)`` array. Predictions fill ``scores``;
    ground truth fills ``visibility``; whichever is unused stays at its default
    (score 0, visibility unlabeled). ``area`` is the instance area in pixels²
    used by OKS; ``bbox`` is optional (x, y, w, h).
    """

    xy: np.ndarray
    scores: np.ndarray | None = None
    visibility: np.ndarray | None = None
    instance_score: float = 1.0
    area: float = 0.0
    image_id: int | str = 0
    bbox: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        xy = _frozen(self.xy, np.float64, (2,), "xy")
        k = xy.shape[0]
        scores = np.zeros(k) if self.scores is None else self.scores
        vis = np.zeros(k, dtype=np.int64) if self.visibility is None else self.visibility
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "scores", _frozen(scores, np.float64, (), "scores"))
        object.__setattr__(self, "visibility", _frozen(vis, np.int64, (), "visibility"))
        if self.scores.shape[0] != k or self.visibility.shape[0] != k:
            raise DimensionError("xy, scores and visibility disagree on keypoint count")
        object.__setattr__(self, "instance_score", float(self.instance_score))
        object.__setattr__(self, "area", float(self.area))
        if self.bbox is not None:
            object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))

    @property
    def num_keypoints(self) -> int:
        return self.xy.shape[0]

    @property
    def keypoints(self) -> tuple[Keypoint, ...]:
        return tuple(
            Keypoint(float(x), float(y), float(s), Visibility(int(v)))
            for (x, y), s, v in zip(self.xy, self.scores, self.visibility)
        )

    @classmethod
    def from_keypoints(cls, keypoints: Iterable[Keypoint], **kwargs) -> "Pose":
        kps = list(keypoints)
        return cls(
            xy=np.array([[k.x, k.y] for k in kps], dtype=np.float64).reshape(-1, 2),
            scores=[k.score for k in kps],
            visibility=[int(k.visibility) for k in kps],
            **kwargs,
        )

    def replace(self, **changes) -> "Pose":
        return dataclasses.replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (
            np.array_equal(self.xy, other.xy)
            and np.array_equal(self.scores, other.scores)
            and np.array_equal(self.visibility, other.visibility)
            and self.instance_score == other.instance_score
            and self.area == other.area
            and self.image_id == other.image_id
            and self.bbox == other.bbox
        )

    __hash__ = None


@dataclass(frozen=True)
class DetectionBox:
    x: float
    y: float
    w: float
    h: float
    score: float = 1.0
    image_id: int | str = 0

    def __post_init__(self):
        for name in ("x", "y", "w", "h", "score"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"box {name} is not finite")
            object.__setattr__(self, name, value)
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box needs positive size, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h


def validate_pose(pose: Pose, spec: SkeletonSpec) -> Pose:
    """Check ``pose`` against ``spec`` and return it unchanged."""
    if pose.num_keypoints != spec.num_keypoints:
        raise DimensionError(
            f"pose has {pose.num_keypoints} keypoints, skeleton {spec.name!r} has "
            f"{spec.num_keypoints}"
        )
    if not np.isfinite(pose.xy).all():
        raise ValueError("pose has non-finite coordinates")
    s = pose.scores
    if not (np.isfinite(s).all() and (s >= 0).all() and (s <= 1).all()):
        raise ValueError("keypoint scores must lie in [0, 1]")
    if not np.isin(pose.visibility, (0, 1, 2)).all():
        raise ValueError("visibility flags must be 0, 1 or 2")
    if not (math.isfinite(pose.instance_score) and 0 <= pose.instance_score <= 1):
        raise ValueError(f"instance score {pose.instance_score} outside [0, 1]")
    if not (math.isfinite(pose.area) and pose.area >= 0):
        raise ValueError(f"area {pose.area} must be finite and non-negative")
    return pose


def box_intersects(a: DetectionBox, b: DetectionBox) -> bool:
    """True when the boxes share an overlap of positive area; touching edges do not count."""
    ow = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    oh = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    return ow > 0 and oh > 0
