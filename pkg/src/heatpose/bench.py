"""Timing harness for the heatmap -> coordinate stage."""

from __future__ import annotations

import statistics
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .model import DetectionBox, SkeletonSpec
from .subpixel import DecodeOptions, decode_pose

__all__ = ["identity_box", "time_decode"]


def identity_box(height: int, width: int, stride: float = 4.0) -> DetectionBox:
    return DetectionBox(0.0, 0.0, width * stride, height * stride, 1.0)


def _run(stacks, boxes, opts, spec, start, count):
    n = len(stacks)
    for r in range(start, start + count):
        decode_pose(stacks[r % n], boxes[r % n], opts, spec)


def time_decode(stacks, opts: DecodeOptions, spec: SkeletonSpec, *, repeat: int = 1000,
                warmup: int = 10, threads: int = 1, boxes=None) -> dict:
    """Per-instance decode latency (single thread) and multi-thread throughput.

    The workload is deterministic: repetition ``r`` decodes instance ``r mod N``.
    Warm-up calls are not counted. Times are in microseconds.
    """
    if repeat < 1:
        raise ValueError("repeat must be >= 1")
    stacks = np.asarray(stacks)
    if stacks.ndim == 3:
        stacks = stacks[None]
    if boxes is None:
        boxes = [identity_box(*stacks.shape[2:])] * len(stacks)
    _run(stacks, boxes, opts, spec, 0, warmup)

    samples = []
    wall0 = time.perf_counter()
    for r in range(repeat):
        t0 = time.perf_counter_ns()
        decode_pose(stacks[r % len(stacks)], boxes[r % len(stacks)], opts, spec)
        samples.append((time.perf_counter_ns() - t0) / 1e3)
    single_wall = time.perf_counter() - wall0

    report = {
        "refine": opts.refinement.value,
        "gaussian_filter": opts.filter_sigma if opts.gaussian_filter else None,
        "shape": list(stacks.shape[1:]),
        "repeat": repeat,
        "samples": len(samples),
        "mean_us": statistics.fmean(samples),
        "median_us": statistics.median(samples),
        "single_thread_throughput": repeat / single_wall,
    }
    threads = max(1, int(threads))
    share = [repeat // threads + (1 if t < repeat % threads else 0) for t in range(threads)]
    starts = np.concatenate([[0], np.cumsum(share)[:-1]])
    with ThreadPoolExecutor(threads) as pool:
        wall0 = time.perf_counter()
        list(pool.map(lambda a: _run(stacks, boxes, opts, spec, *a), zip(starts, share)))
        multi_wall = time.perf_counter() - wall0
    report["threads"] = threads
    report["multi_thread_us_per_instance"] = multi_wall / repeat * 1e6
    report["multi_thread_throughput"] = repeat / multi_wall
    report["speedup"] = single_wall / multi_wall
    return report
