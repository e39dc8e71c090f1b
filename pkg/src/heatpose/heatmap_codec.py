"""Gaussian heatmap targets, heatmap losses, smoothing and flip-test fusion.

A heatmap stack is a plain ``(C, H, W)`` float array, one channel per keypoint.
Heatmap coordinates are image coordinates divided by the stride, with no
half-pixel offset, so a keypoint at image ``x = 4 * j`` lands exactly on
column ``j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from .model import DimensionError, Pose, SkeletonSpec

__all__ = [
    "EncodeConfig",
    "as_stack",
    "encode_gaussian",
    "encode_all_zero",
    "mse_loss",
    "combined_loss",
    "gaussian_kernel1d",
    "gaussian_filter",
    "unflip",
    "subpixel_shift",
    "flip_fuse_ssp",
]


@dataclass(frozen=True)
class EncodeConfig:
    sigma: float = 2.0
    stride: float = 4.0
    peak_value: float = 1.0
    truncate: float = 3.0  # support radius in units of sigma

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if not self.stride >= 1:
            raise ValueError("stride must be >= 1")
        if not self.truncate > 0:
            raise ValueError("truncate must be > 0")


def as_stack(h, *, name: str = "heatmap") -> np.ndarray:
    """Validate a ``(C, H, W)`` stack of finite values and return it as an array."""
    arr = np.asarray(h)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise DimensionError(f"{name} must be a non-empty (C, H, W) array, got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def encode_gaussian(gt: Pose, cfg: EncodeConfig, dims: tuple[int, int, int]) -> np.ndarray:
    """Render one truncated Gaussian per labeled keypoint.

    Values beyond ``cfg.truncate * sigma`` from the centre are exactly zero, and
    channels of unlabeled keypoints stay all-zero.
    """
    c, h, w = (int(d) for d in dims)
    if c != gt.num_keypoints:
        raise DimensionError(f"{c} channels requested for a {gt.num_keypoints}-keypoint pose")
    if h < 1 or w < 1:
        raise DimensionError(f"bad heatmap size {(c, h, w)}")
    out = np.zeros((c, h, w), dtype=np.float64)
    radius = cfg.truncate * cfg.sigma
    two_var = 2.0 * cfg.sigma**2
    for k in range(c):
        if gt.visibility[k] <= 0:
            continue
        cx = gt.xy[k, 0] / cfg.stride
        cy = gt.xy[k, 1] / cfg.stride
        x0, x1 = max(0, math.ceil(cx - radius)), min(w - 1, math.floor(cx + radius))
        y0, y1 = max(0, math.ceil(cy - radius)), min(h - 1, math.floor(cy + radius))
        if x0 > x1 or y0 > y1:
            continue
        dx2 = (np.arange(x0, x1 + 1) - cx) ** 2
        dy2 = (np.arange(y0, y1 + 1) - cy) ** 2
        d2 = dy2[:, None] + dx2[None, :]
        patch = cfg.peak_value * np.exp(-d2 / two_var)
        patch[d2 > radius * radius] = 0.0
        out[k, y0 : y1 + 1, x0 : x1 + 1] = patch
    return out


def encode_all_zero(dims: tuple[int, int, int]) -> np.ndarray:
    """Target for hard-negative crops: no keypoint anywhere."""
    return np.zeros(tuple(int(d) for d in dims), dtype=np.float64)


def mse_loss(h, h_gt) -> float:
    h = as_stack(h)
    h_gt = as_stack(h_gt, name="target")
    if h.shape != h_gt.shape:
        raise DimensionError(f"shape mismatch {h.shape} vs {h_gt.shape}")
    diff = h.astype(np.float64) - h_gt.astype(np.float64)
    return float(np.mean(diff * diff))


def combined_loss(l_main: float, l_aux: float, lam: float) -> float:
    """Main loss plus ``lam`` times the auxiliary-decoder loss."""
    if lam < 0:
        raise ValueError("auxiliary weight must be non-negative")
    if l_main < 0 or l_aux < 0:
        raise ValueError("losses must be non-negative")
    return l_main + lam * l_aux


def gaussian_kernel1d(filter_sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian taps with radius ceil(3 * sigma)."""
    if not filter_sigma > 0:
        raise ValueError("filter_sigma must be > 0")
    r = math.ceil(3.0 * filter_sigma)
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * filter_sigma**2))
    return k / k.sum()


def gaussian_filter(h, filter_sigma: float) -> np.ndarray:
    """Smooth every channel with a separable normalized Gaussian, replicating borders."""
    h = as_stack(h)
    if h.dtype not in (np.float32, np.float64):
        h = h.astype(np.float64)
    k = gaussian_kernel1d(filter_sigma).astype(h.dtype)
    out = np.empty_like(h)
    for c in range(h.shape[0]):
        out[c] = cv2.sepFilter2D(h[c], -1, k, k, borderType=cv2.BORDER_REPLICATE)
    return out


def unflip(h_flipped, spec: SkeletonSpec) -> np.ndarray:
    """Undo a horizontal mirror: reverse columns and swap left/right channels."""
    h_flipped = as_stack(h_flipped, name="flipped heatmap")
    if h_flipped.shape[0] != spec.num_keypoints:
        raise DimensionError(
            f"{h_flipped.shape[0]} channels for a {spec.num_keypoints}-keypoint skeleton"
        )
    return h_flipped[spec.flip_permutation(), :, ::-1]


def subpixel_shift(h, shift: float) -> np.ndarray:
    """Move every channel right by ``shift`` in [0, 1] columns via linear interpolation.

    Column -1 reads as a copy of column 0.
    """
    if not 0.0 <= shift <= 1.0:
        raise ValueError(f"shift must lie in [0, 1], got {shift}")
    h = np.asarray(h)
    left = np.concatenate([h[..., :1], h[..., :-1]], axis=-1)
    return (1.0 - shift) * h + shift * left


def flip_fuse_ssp(h, h_flipped, shift: float, spec: SkeletonSpec) -> np.ndarray:
    """Average a heatmap with the shifted, un-mirrored heatmap of the flipped input.

    ``shift = 1`` is the classic one-pixel shift and ``shift = 0`` plain averaging.
    """
    h = as_stack(h)
    h_flipped = as_stack(h_flipped, name="flipped heatmap")
    if h.shape != h_flipped.shape:
        raise DimensionError(f"shape mismatch {h.shape} vs {h_flipped.shape}")
    aligned = subpixel_shift(unflip(h_flipped, spec), shift)
    return 0.5 * (h + aligned)
