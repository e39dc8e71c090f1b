"""Seeded synthetic heatmaps with known sub-pixel peak locations."""

from __future__ import annotations

import math

import numpy as np

from .heatmap_codec import EncodeConfig, encode_gaussian
from .model import Pose

__all__ = ["sample_centers", "render_peaks", "synth_stacks", "gaussian_channel"]


def sample_centers(rng, count: int, dims, sigma: float) -> np.ndarray:
    """Uniform sub-pixel centres, kept ``ceil(3 sigma)`` px away from the border when possible."""
    c, h, w = dims
    out = np.empty((count, c, 2))
    for axis, size in ((0, w), (1, h)):
        margin = math.ceil(3 * sigma)
        lo, hi = (margin, size - 1 - margin) if size - 1 - 2 * margin > 0 else (0, size - 1)
        out[..., axis] = rng.uniform(lo, hi, (count, c))
    return out


def render_peaks(centers, dims, sigma: float) -> np.ndarray:
    """One truncated Gaussian per channel at the given heatmap-frame centres."""
    c, h, w = dims
    cfg = EncodeConfig(sigma=sigma, stride=1.0)
    pose = Pose(xy=centers, visibility=np.full(c, 2))
    return encode_gaussian(pose, cfg, (c, h, w))


def gaussian_channel(h: int, w: int, cx: float, cy: float, sigma: float) -> np.ndarray:
    """Untruncated Gaussian on an ``(h, w)`` grid."""
    ys, xs = np.mgrid[0:h, 0:w]
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma**2))


def synth_stacks(count: int, dims, sigma: float = 2.0, noise: float = 0.0, seed: int = 0):
    """``count`` stacks of shape ``dims`` plus their exact ``(count, C, 2)`` centres.

    Noise is additive, zero-mean Gaussian with standard deviation ``noise``.
    """
    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng(seed)
    centers = sample_centers(rng, count, dims, sigma)
    stacks = np.stack([render_peaks(centers[n], dims, sigma) for n in range(count)]) if count else np.zeros((0, *dims))
    if noise > 0:
        stacks = stacks + rng.normal(0.0, noise, stacks.shape)
    return stacks, centers
