"""OKS-based keypoint evaluation: per-instance OKS, greedy matching, AP and AR.

AP at a threshold ``s`` is the fraction of predictions whose matched OKS is
strictly greater than ``s``; AR is the fraction of ground-truth instances
claimed with OKS above ``s``. A COCO-style 101-point interpolated AP is
available with ``ap_mode="coco101"`` for comparison with external tools.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .model import Pose, SkeletonSpec
from .pose_nms import OksConvention, oks_exponent

__all__ = [
    "OKS_THRESHOLDS",
    "MEDIUM_RANGE",
    "LARGE_RANGE",
    "MatchRecord",
    "EvalReport",
    "oks_gt",
    "match_greedy",
    "ap_at",
    "recall_at",
    "coco101_ap",
    "evaluate",
]

OKS_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
MEDIUM_RANGE = (32.0**2, 96.0**2)
LARGE_RANGE = (96.0**2, math.inf)


def oks_gt(pred: Pose, gt: Pose, spec: SkeletonSpec, convention=OksConvention.COCO) -> float:
    """OKS of a prediction against ground truth, over labeled keypoints only."""
    labeled = gt.visibility > 0
    if not labeled.any():
        raise ValueError("ground-truth pose has no labeled keypoints")
    d2 = np.sum((pred.xy[labeled] - gt.xy[labeled]) ** 2, axis=1)
    e = oks_exponent(d2, gt.area, spec.sigmas[labeled], convention)
    return float(np.mean(np.exp(-e)))


@dataclass(frozen=True)
class MatchRecord:
    image_id: int | str
    pred_index: int
    gt_index: int | None
    oks: float
    score: float
    area: float  # matched gt area, or the prediction's own area when unmatched


def match_greedy(
    preds: Sequence[Pose],
    gts: Sequence[Pose],
    spec: SkeletonSpec,
    s: float | None = None,
    convention=OksConvention.COCO,
) -> list[MatchRecord]:
    """Greedy one-to-one assignment of predictions to ground truth in one image.

    Predictions go in descending score order (input order on ties) and each one
    claims the unclaimed ground truth with the highest OKS. With ``s=None`` the
    claim does not depend on any threshold; with ``s`` given only ground truth
    with OKS > s can be claimed. Unmatched predictions get OKS 0.
    """
    image_id = preds[0].image_id if preds else (gts[0].image_id if gts else 0)
    oks = np.array([[oks_gt(p, g, spec, convention) for g in gts] for p in preds]).reshape(
        len(preds), len(gts)
    )
    order = np.argsort(-np.array([p.instance_score for p in preds]), kind="stable")
    free = np.ones(len(gts), dtype=bool)
    records = []
    for i in order:
        row = np.where(free, oks[i], -np.inf)
        if s is not None:
            row = np.where(row > s, row, -np.inf)
        g = int(np.argmax(row)) if len(gts) else -1
        if g >= 0 and np.isfinite(row[g]):
            free[g] = False
            records.append(
                MatchRecord(image_id, int(i), g, float(oks[i, g]), preds[i].instance_score, gts[g].area)
            )
        else:
            records.append(MatchRecord(image_id, int(i), None, 0.0, preds[i].instance_score, preds[i].area))
    return records


def ap_at(matches: Sequence[MatchRecord], s: float) -> float:
    """Fraction of predictions whose OKS is strictly above ``s`` (0 when empty)."""
    if not matches:
        return 0.0
    return sum(1 for m in matches if m.oks > s) / len(matches)


def recall_at(matches: Sequence[MatchRecord], gts, s: float) -> float:
    """Fraction of ground-truth instances claimed with OKS strictly above ``s``.

    ``gts`` is the ground-truth collection or simply its size.
    """
    n = gts if isinstance(gts, int) else len(gts)
    if n == 0:
        return 0.0
    return sum(1 for m in matches if m.gt_index is not None and m.oks > s) / n


def coco101_ap(matches: Sequence[MatchRecord], num_gts: int, s: float) -> float:
    """Precision-recall area sampled at 101 recall points (COCO style, unlike the ratio AP)."""
    if not matches or num_gts == 0:
        return 0.0
    order = np.argsort(-np.array([m.score for m in matches]), kind="stable")
    tp = np.array([matches[i].gt_index is not None and matches[i].oks > s for i in order])
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / num_gts
    precision = tps / (tps + fps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, np.linspace(0.0, 1.0, 101), side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


@dataclass
class EvalReport:
    ap_per_threshold: dict[float, float]
    ar_per_threshold: dict[float, float]
    mean_ap: float
    mean_ar: float
    ap_medium: float
    ap_large: float
    ar_medium: float
    ar_large: float
    matched_pairs: list[MatchRecord] = field(default_factory=list, repr=False)

    def to_json(self) -> dict[str, float]:
        return {
            "ap": self.mean_ap,
            "ap_50": self.ap_per_threshold[0.5],
            "ap_75": self.ap_per_threshold[0.75],
            "ap_m": self.ap_medium,
            "ap_l": self.ap_large,
            "ar": self.mean_ar,
            "ar_50": self.ar_per_threshold[0.5],
            "ar_75": self.ar_per_threshold[0.75],
            "ar_m": self.ar_medium,
            "ar_l": self.ar_large,
        }


def _in_range(area: float, rng: tuple[float, float], lower_inclusive: bool) -> bool:
    lo, hi = rng
    above = area >= lo if lower_inclusive else area > lo
    return above and area <= hi


def evaluate(
    preds: Iterable[Pose],
    gts: Iterable[Pose],
    spec: SkeletonSpec,
    *,
    image_ids: Iterable | None = None,
    thresholds: Sequence[float] = OKS_THRESHOLDS,
    medium_range: tuple[float, float] = MEDIUM_RANGE,
    large_range: tuple[float, float] = LARGE_RANGE,
    ap_mode: str = "ratio",
    convention=OksConvention.COCO,
) -> EvalReport:
    """Score predictions against ground truth over every OKS threshold.

    Ground-truth poses without any labeled keypoint are ignored. Each prediction
    falls in the size stratum of the ground truth it matched (or of its own area
    when unmatched); ``medium_range`` is closed, ``large_range`` open below.
    """
    if ap_mode not in ("ratio", "coco101"):
        raise ValueError(f"unknown ap_mode {ap_mode!r}")
    by_image_gt: dict = defaultdict(list)
    for g in gts:
        if (g.visibility > 0).any():
            by_image_gt[g.image_id].append(g)
        else:
            by_image_gt.setdefault(g.image_id, [])
    known = set(by_image_gt) | set(image_ids or ())
    by_image_pred: dict = defaultdict(list)
    for p in preds:
        if p.image_id not in known:
            raise ValueError(f"prediction refers to unknown image id {p.image_id!r}")
        by_image_pred[p.image_id].append(p)

    records: list[MatchRecord] = []
    for image_id in sorted(known, key=lambda v: (str(type(v)), v)):
        records.extend(
            match_greedy(by_image_pred.get(image_id, []), by_image_gt.get(image_id, []), spec, None, convention)
        )
    all_gts = [g for lst in by_image_gt.values() for g in lst]

    def stratum(rng, lower_inclusive):
        return (
            [m for m in records if _in_range(m.area, rng, lower_inclusive)],
            sum(1 for g in all_gts if _in_range(g.area, rng, lower_inclusive)),
        )

    def ap(ms, n_gt, s):
        return coco101_ap(ms, n_gt, s) if ap_mode == "coco101" else ap_at(ms, s)

    n_gt = len(all_gts)
    ap_t = {float(s): ap(records, n_gt, s) for s in thresholds}
    ar_t = {float(s): recall_at(records, n_gt, s) for s in thresholds}
    med, n_med = stratum(medium_range, True)
    lrg, n_lrg = stratum(large_range, False)
    return EvalReport(
        ap_per_threshold=ap_t,
        ar_per_threshold=ar_t,
        mean_ap=float(np.mean(list(ap_t.values()))),
        mean_ar=float(np.mean(list(ar_t.values()))),
        ap_medium=float(np.mean([ap(med, n_med, s) for s in thresholds])),
        ap_large=float(np.mean([ap(lrg, n_lrg, s) for s in thresholds])),
        ar_medium=float(np.mean([recall_at(med, n_med, s) for s in thresholds])),
        ar_large=float(np.mean([recall_at(lrg, n_lrg, s) for s in thresholds])),
        matched_pairs=records,
    )
