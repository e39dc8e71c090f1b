"""Shared hand-built fixtures and plain-Python oracles."""

import math

import numpy as np

from heatpose.model import Pose, coco_skeleton

THRESHOLDS = [0.5 + 0.05 * i for i in range(10)]


def three_image_fixture(seed=7):
    """8 ground-truth poses and 12 predictions over images 1..3 (COCO skeleton).

    Predictions are perturbed copies of ground truth at graded noise levels plus
    a few strays; areas span small, medium and large.
    """
    rng = np.random.default_rng(seed)
    spec = coco_skeleton()
    gt_layout = {1: [400.0, 5000.0, 12000.0], 2: [2000.0, 9216.0], 3: [30000.0, 1024.0, 800.0]}
    gts, preds = [], []
    for image_id, areas in gt_layout.items():
        for area in areas:
            xy = rng.uniform(0, 200, (17, 2))
            vis = np.full(17, 2)
            vis[rng.choice(17, 3, replace=False)] = rng.choice([0, 1], 3)
            gts.append(Pose(xy=xy, visibility=vis, area=area, image_id=image_id))
    noise = [0.5, 2.0, 4.0, 1.0, 8.0, 0.2, 3.0, 6.0]
    for g, n in zip(gts, noise):
        preds.append(Pose(xy=g.xy + rng.normal(0, n, (17, 2)), scores=np.full(17, 0.8),
                          instance_score=float(rng.uniform(0.3, 1.0)), area=g.area, image_id=g.image_id))
    # duplicates and strays
    preds.append(Pose(xy=gts[0].xy + 1.0, instance_score=0.2, area=gts[0].area, image_id=1))
    preds.append(Pose(xy=rng.uniform(0, 200, (17, 2)), instance_score=0.95, area=6000.0, image_id=2))
    preds.append(Pose(xy=gts[5].xy + rng.normal(0, 1.5, (17, 2)), instance_score=0.5,
                      area=gts[5].area, image_id=3))
    preds.append(Pose(xy=rng.uniform(0, 200, (17, 2)), instance_score=0.1, area=20000.0, image_id=3))
    return preds, gts, spec


def oks_oracle(pred, gt, sigmas):
    num = den = 0
    for k in range(len(sigmas)):
        if gt.visibility[k] > 0:
            d2 = (pred.xy[k][0] - gt.xy[k][0]) ** 2 + (pred.xy[k][1] - gt.xy[k][1]) ** 2
            num += math.exp(-d2 / (2 * gt.area * (2 * sigmas[k]) ** 2))
            den += 1
    return num / den


def recount(preds, gts, spec, lo=32.0**2, hi=96.0**2, thresholds=THRESHOLDS):
    """Independent re-implementation of the ratio AP / AR report."""
    sig = list(spec.oks_k)
    rows = []  # (oks, matched, stratum area)
    for image_id in sorted({p.image_id for p in preds} | {g.image_id for g in gts}):
        ps = [p for p in preds if p.image_id == image_id]
        gs = [g for g in gts if g.image_id == image_id]
        ps = sorted(ps, key=lambda p: -p.instance_score)
        taken = set()
        for p in ps:
            best, best_j = -1.0, None
            for j, g in enumerate(gs):
                if j not in taken:
                    o = oks_oracle(p, g, sig)
                    if o > best:
                        best, best_j = o, j
            if best_j is None:
                rows.append((0.0, False, p.area))
            else:
                taken.add(best_j)
                rows.append((best, True, gs[best_j].area))

    def ap(rs, s):
        return sum(o > s for o, _, _ in rs) / len(rs) if rs else 0.0

    def ar(rs, n, s):
        return sum(o > s and m for o, m, _ in rs) / n if n else 0.0

    med = [r for r in rows if lo <= r[2] <= hi]
    lrg = [r for r in rows if r[2] > hi]
    n_med = sum(lo <= g.area <= hi for g in gts)
    n_lrg = sum(g.area > hi for g in gts)
    mean = lambda f: sum(f(s) for s in thresholds) / len(thresholds)
    return {
        "ap": mean(lambda s: ap(rows, s)),
        "ap_50": ap(rows, 0.5),
        "ap_75": ap(rows, 0.75),
        "ap_m": mean(lambda s: ap(med, s)),
        "ap_l": mean(lambda s: ap(lrg, s)),
        "ar": mean(lambda s: ar(rows, len(gts), s)),
        "ar_50": ar(rows, len(gts), 0.5),
        "ar_75": ar(rows, len(gts), 0.75),
        "ar_m": mean(lambda s: ar(med, n_med, s)),
        "ar_l": mean(lambda s: ar(lrg, n_lrg, s)),
    }


def cli_workspace(root):
    """Write a small input set for every subcommand; returns {name: argv without --out}."""
    import json

    from heatpose.cli import main
    from heatpose.pipeline import poses_to_results

    root = str(root)
    preds, gts, spec = three_image_fixture()
    images = [{"id": i, "width": 640, "height": 480} for i in (1, 2, 3)]
    anns = []
    for n, g in enumerate(gts):
        flat = np.column_stack([g.xy, g.visibility]).ravel().tolist()
        x0, y0 = g.xy.min(0)
        anns.append({"id": n + 1, "image_id": g.image_id, "keypoints": flat, "area": g.area,
                     "bbox": [float(x0), float(y0), 40.0, 60.0]})
    with open(f"{root}/gt.json", "w") as fh:
        json.dump({"images": images, "annotations": anns}, fh)
    with open(f"{root}/preds.json", "w") as fh:
        json.dump(poses_to_results(preds), fh)
    rng = np.random.default_rng(3)
    dets = [{"image_id": int(rng.integers(1, 4)), "bbox": rng.uniform(0, 300, 2).tolist() + [30.0, 50.0],
             "score": float(rng.uniform())} for _ in range(40)]
    with open(f"{root}/dets.json", "w") as fh:
        json.dump(dets, fh)
    kps = np.column_stack([rng.uniform(0, 100, (14, 2)), rng.uniform(0, 1, 14)])
    aic = [{"image_id": 1, "keypoints": kps.ravel().tolist(), "score": 0.9, "area": 900.0}]
    with open(f"{root}/aic.json", "w") as fh:
        json.dump(aic, fh)
    with open(f"{root}/table.json", "w") as fh:
        json.dump({"source": "aic", "target": "coco",
                   "pairs": [[0, 6], [1, 8], [2, 10], [3, 5], [4, 7], [5, 9],
                             [6, 12], [7, 14], [8, 16], [9, 11], [10, 13], [11, 15]]}, fh)
    assert main(["synth", "--count", "3", "--dims", "17,24,18", "--seed", "5",
                 "--out", f"{root}/s.hmt", "--gt", f"{root}/s_gt.json"]) == 0
    assert main(["synth", "--count", "3", "--dims", "17,24,18", "--seed", "6",
                 "--out", f"{root}/f.hmt", "--gt", f"{root}/f_gt.json"]) == 0
    with open(f"{root}/s_gt.json") as fh:
        with open(f"{root}/boxes.json", "w") as out:
            json.dump(json.load(fh)["boxes"], out)
    return {
        "decode": ["decode", "--heatmaps", f"{root}/s.hmt", "--boxes", f"{root}/boxes.json",
                   "--refine", "paraboloid", "--gauss-sigma", "1", "--threads", "2"],
        "decode_ssp": ["decode", "--heatmaps", f"{root}/s.hmt", "--boxes", f"{root}/boxes.json",
                       "--flip-heatmaps", f"{root}/f.hmt", "--ssp", "0.5"],
        "eval": ["eval", "--preds", f"{root}/preds.json", "--gt", f"{root}/gt.json"],
        "nms": ["nms", "--poses", f"{root}/preds.json", "--mode", "soft", "--thr", "0.3"],
        "mine": ["mine", "--dets", f"{root}/dets.json", "--gt", f"{root}/gt.json", "--thr", "0.5"],
        "screen": ["screen", "--dets", f"{root}/dets.json", "--images", "3", "--target-avg", "4"],
        "align": ["align", "--poses", f"{root}/aic.json", "--table", f"{root}/table.json"],
        "synth": ["synth", "--count", "2", "--dims", "3,8,8", "--seed", "9", "--noise", "0.01"],
    }
