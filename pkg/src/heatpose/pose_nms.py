"""OKS-based pose NMS, in the usual hard form and as coordinate fusion ("soft")."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import Pose, SkeletonSpec

__all__ = [
    "OksConvention",
    "NmsMode",
    "NmsConfig",
    "oks_exponent",
    "oks_iou",
    "oks_iou_matrix",
    "greedy_groups",
    "hard_nms",
    "soft_nms",
    "nms",
]


class OksConvention(str, enum.Enum):
    """How the squared distance is normalized inside the OKS exponential.

    ``COCO``: ``d² / (2 · area · (2σ)²)``, as in the COCO evaluation code.
    ``LITERAL``: ``d² / (2 · area² · σ²)``, with the area itself squared.
    """

    COCO = "coco"
    LITERAL = "literal"


class NmsMode(str, enum.Enum):
    HARD = "hard"
    SOFT = "soft"


@dataclass(frozen=True)
class NmsConfig:
    oks_threshold: float = 0.9
    mode: NmsMode = NmsMode.HARD
    convention: OksConvention = OksConvention.COCO

    def __post_init__(self):
        if not 0.0 < self.oks_threshold < 1.0:
            raise ValueError(f"OKS threshold must lie in (0, 1), got {self.oks_threshold}")
        object.__setattr__(self, "mode", NmsMode(self.mode))
        object.__setattr__(self, "convention", OksConvention(self.convention))


def oks_exponent(d2, area: float, sigmas, convention=OksConvention.COCO) -> np.ndarray:
    """Per-keypoint exponent ``e`` such that the keypoint similarity is ``exp(-e)``."""
    if not area > 0:
        raise ValueError(f"OKS needs a positive reference area, got {area}")
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if OksConvention(convention) is OksConvention.COCO:
        return d2 / (2.0 * area * (2.0 * sigmas) ** 2)
    return d2 / (2.0 * area**2 * sigmas**2)


def oks_iou(p_i: Pose, p_j: Pose, spec: SkeletonSpec, convention=OksConvention.COCO) -> float:
    """OKS between two predictions, ``p_i`` being the reference (its area is used).

    All keypoints take part; there are no visibility flags on predictions.
    """
    d2 = np.sum((p_j.xy - p_i.xy) ** 2, axis=1)
    return float(np.mean(np.exp(-oks_exponent(d2, p_i.area, spec.sigmas, convention))))


def oks_iou_matrix(poses: Sequence[Pose], spec: SkeletonSpec, convention=OksConvention.COCO):
    """``M[i, j] = oks_iou(poses[i], poses[j])``."""
    n = len(poses)
    if n == 0:
        return np.zeros((0, 0))
    xy = np.stack([p.xy for p in poses])  # (N, K, 2)
    areas = np.array([p.area for p in poses])
    if not (areas > 0).all():
        raise ValueError("OKS needs a positive area on every pose")
    d2 = np.sum((xy[None, :, :, :] - xy[:, None, :, :]) ** 2, axis=-1)  # (N, N, K)
    s = spec.sigmas
    if OksConvention(convention) is OksConvention.COCO:
        e = d2 / (2.0 * areas[:, None, None] * (2.0 * s) ** 2)
    else:
        e = d2 / (2.0 * areas[:, None, None] ** 2 * s**2)
    return np.mean(np.exp(-e), axis=-1)


def greedy_groups(poses: Sequence[Pose], cfg: NmsConfig, spec: SkeletonSpec):
    """Run greedy OKS suppression.

    Returns ``(kept, groups, ious)``: kept indices in descending score order,
    for each kept index the list of indices it suppressed, and the OKS matrix.
    Equal scores keep their input order.
    """
    ious = oks_iou_matrix(poses, spec, cfg.convention)
    scores = np.array([p.instance_score for p in poses])
    remaining = list(np.argsort(-scores, kind="stable"))
    kept: list[int] = []
    groups: dict[int, list[int]] = {}
    while remaining:
        i, rest = remaining[0], remaining[1:]
        kept.append(int(i))
        groups[int(i)] = [int(j) for j in rest if ious[i, j] > cfg.oks_threshold]
        remaining = [j for j in rest if ious[i, j] <= cfg.oks_threshold]
    return kept, groups, ious


def hard_nms(poses: Sequence[Pose], cfg: NmsConfig, spec: SkeletonSpec) -> list[Pose]:
    kept, _, _ = greedy_groups(poses, cfg, spec)
    return [poses[i] for i in kept]


def soft_nms(poses: Sequence[Pose], cfg: NmsConfig, spec: SkeletonSpec) -> list[Pose]:
    """Greedy NMS whose survivors take the OKS-weighted mean of the poses they suppress.

    The survivor weighs itself with 1. Scores, area and image id stay those of
    the survivor; only coordinates change.
    """
    kept, groups, ious = greedy_groups(poses, cfg, spec)
    out = []
    for i in kept:
        members = [i] + groups[i]
        w = np.array([1.0] + [ious[i, j] for j in groups[i]])
        xy = np.stack([poses[j].xy for j in members])
        fused = np.tensordot(w, xy, axes=1) / w.sum()
        out.append(poses[i].replace(xy=fused) if groups[i] else poses[i])
    return out


def nms(poses: Sequence[Pose], cfg: NmsConfig, spec: SkeletonSpec) -> list[Pose]:
    if cfg.mode is NmsMode.SOFT:
        return soft_nms(poses, cfg, spec)
    return hard_nms(poses, cfg, spec)
