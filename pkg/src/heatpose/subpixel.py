"""Heatmap -> keypoint decoding with sub-pixel refinement.

The refinement kernels are vectorized over a ``(M, H, W)`` batch of channels so
that a full pose (or a batch of poses) is decoded without a Python loop per
keypoint. The single-channel helpers (``argmax_decode``, ``parabola_refine``...)
are thin wrappers around the same kernels.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .heatmap_codec import as_stack, gaussian_filter
from .model import DetectionBox, DimensionError, Pose, SkeletonSpec

__all__ = [
    "EPS",
    "Refinement",
    "DecodeOptions",
    "PeakEstimate",
    "argmax_decode",
    "quarter_shift",
    "parabola_refine",
    "paraboloid_refine",
    "paraboloid_coefficients",
    "find_peaks",
    "refine_peaks",
    "decode_stack",
    "heatmap_to_box",
    "decode_pose",
    "decode_batch",
]

EPS = 1e-12
MAX_SHIFT = 0.5


class Refinement(str, enum.Enum):
    NONE = "none"
    QUARTER = "quarter_shift"
    PARABOLA = "parabola"
    PARABOLOID = "paraboloid"

    @classmethod
    def parse(cls, value: "str | Refinement") -> "Refinement":
        if isinstance(value, cls):
            return value
        aliases = {"quarter": cls.QUARTER, "0.25": cls.QUARTER}
        try:
            return aliases.get(value) or cls(value)
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown refinement {value!r}; expected one of {names}") from None


@dataclass(frozen=True)
class DecodeOptions:
    refinement: Refinement = Refinement.PARABOLA
    gaussian_filter: bool = False
    filter_sigma: float = 1.0
    stride: float = 4.0  # nominal image-to-heatmap scale; crop-back derives it from the box
    paraboloid_weights: str = "uniform"

    def __post_init__(self):
        object.__setattr__(self, "refinement", Refinement.parse(self.refinement))
        if self.gaussian_filter and not self.filter_sigma > 0:
            raise ValueError("filter_sigma must be > 0 when filtering is enabled")
        if self.paraboloid_weights not in _PATCH_WEIGHTS:
            raise ValueError(f"unknown paraboloid weights {self.paraboloid_weights!r}")


@dataclass(frozen=True)
class PeakEstimate:
    """Peak location in heatmap coordinates (x = column, y = row)."""

    x: float
    y: float
    score: float


# ---------------------------------------------------------------- kernels


def find_peaks(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Integer argmax (x, y) per channel; ties go to the smallest row-major index."""
    m, h, w = z.shape
    flat = np.argmax(z.reshape(m, h * w), axis=1)
    return flat % w, flat // w


def _axis_samples(z, xs, ys, axis):
    """Values at -1, 0, +1 along one axis and whether both neighbours exist."""
    m, h, w = z.shape
    idx = np.arange(m)
    if axis == 0:
        lo = z[idx, ys, np.maximum(xs - 1, 0)]
        hi = z[idx, ys, np.minimum(xs + 1, w - 1)]
        inside = (xs > 0) & (xs < w - 1)
    else:
        lo = z[idx, np.maximum(ys - 1, 0), xs]
        hi = z[idx, np.minimum(ys + 1, h - 1), xs]
        inside = (ys > 0) & (ys < h - 1)
    mid = z[idx, ys, xs]
    return lo.astype(np.float64), mid.astype(np.float64), hi.astype(np.float64), inside


def _quarter_axis(lo, hi, inside):
    return np.where(inside, 0.25 * np.sign(hi - lo), 0.0)


def _parabola_axis(lo, mid, hi, inside):
    den = lo + hi - 2.0 * mid
    ok = inside & (np.abs(den) >= EPS)
    shift = np.divide(lo - hi, 2.0 * den, out=np.zeros_like(den), where=ok)
    shift = np.where(ok, shift, _quarter_axis(lo, hi, inside))
    return np.clip(shift, -MAX_SHIFT, MAX_SHIFT)


def _gather_patches(z, xs, ys):
    m, h, w = z.shape
    rows = np.clip(ys[:, None] + np.arange(-1, 2), 0, h - 1)
    cols = np.clip(xs[:, None] + np.arange(-1, 2), 0, w - 1)
    idx = np.arange(m)[:, None, None]
    return z[idx, rows[:, :, None], cols[:, None, :]].astype(np.float64)


_BINOMIAL = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0])


def _binomial_coefficients(p):
    # 1-2-1 weighted stencil; p[..., row, col] with row ~ y and col ~ x.
    z00, z01, z02 = p[..., 0, 0], p[..., 0, 1], p[..., 0, 2]
    z10, z11, z12 = p[..., 1, 0], p[..., 1, 1], p[..., 1, 2]
    z20, z21, z22 = p[..., 2, 0], p[..., 2, 1], p[..., 2, 2]
    a = (2 * (z12 + z10 - 2 * z11) + (z02 + z00 - 2 * z01) + (z22 + z20 - 2 * z21)) / 8
    b = (2 * (z01 + z21 - 2 * z11) + (z00 + z20 - 2 * z10) + (z02 + z22 - 2 * z12)) / 8
    c = (z00 + z22 - z02 - z20) / 4
    d = ((z02 - z00) + (z22 - z20) + 2 * (z12 - z10)) / 8
    e = ((z20 - z00) + (z22 - z02) + 2 * (z21 - z01)) / 8
    f = (p * _BINOMIAL).sum(axis=(-2, -1)) / 16 - (a + b) / 2
    return a, b, c, d, e, f


def _uniform_coefficients(p):
    # ordinary least squares on the 3x3 grid
    z00, z02, z20, z22 = p[..., 0, 0], p[..., 0, 2], p[..., 2, 0], p[..., 2, 2]
    col_d2 = p[..., :, 0] + p[..., :, 2] - 2 * p[..., :, 1]
    row_d2 = p[..., 0, :] + p[..., 2, :] - 2 * p[..., 1, :]
    a = col_d2.sum(-1) / 6
    b = row_d2.sum(-1) / 6
    c = (z00 + z22 - z02 - z20) / 4
    d = (p[..., :, 2] - p[..., :, 0]).sum(-1) / 6
    e = (p[..., 2, :] - p[..., 0, :]).sum(-1) / 6
    f = p.sum(axis=(-2, -1)) / 9 - 2 * (a + b) / 3
    return a, b, c, d, e, f


_PATCH_WEIGHTS = {"binomial": _binomial_coefficients, "uniform": _uniform_coefficients}


def paraboloid_coefficients(patch, weights: str = "uniform"):
    """Fit ``a x² + b y² + c xy + d x + e y + f`` to 3x3 patch(es) centred on the origin.

    ``weights="uniform"`` (default) is the ordinary least-squares fit;
    ``"binomial"`` is the commonly printed closed-form stencil, which equals a
    1-2-1 x 1-2-1 weighted fit. Both are exact on patches sampled from a
    quadratic. Returns ``(a, b, c, d, e, f)``.
    """
    p = np.asarray(patch, dtype=np.float64)
    if p.shape[-2:] != (3, 3):
        raise DimensionError(f"patch must end in (3, 3), got {p.shape}")
    return _PATCH_WEIGHTS[weights](p)


def refine_peaks(z, xs, ys, mode, *, weights: str = "uniform"):
    """Sub-pixel (x, y) for the integer peaks ``xs, ys`` of each channel in ``z``."""
    mode = Refinement.parse(mode)
    xs = np.asarray(xs, dtype=np.intp)
    ys = np.asarray(ys, dtype=np.intp)
    if mode is Refinement.NONE:
        return xs.astype(np.float64), ys.astype(np.float64)
    xl, xm, xh, x_in = _axis_samples(z, xs, ys, 0)
    yl, ym, yh, y_in = _axis_samples(z, xs, ys, 1)
    if mode is Refinement.QUARTER:
        return xs + _quarter_axis(xl, xh, x_in), ys + _quarter_axis(yl, yh, y_in)
    sx = _parabola_axis(xl, xm, xh, x_in)
    sy = _parabola_axis(yl, ym, yh, y_in)
    if mode is Refinement.PARABOLA:
        return xs + sx, ys + sy

    a, b, c, d, e, _ = _PATCH_WEIGHTS[weights](_gather_patches(z, xs, ys))
    den = c * c - 4 * a * b
    ok = x_in & y_in & (np.abs(den) >= EPS)
    safe = np.where(ok, den, 1.0)
    px = (2 * b * d - c * e) / safe
    py = (2 * a * e - c * d) / safe
    ok &= (np.abs(px) <= MAX_SHIFT) & (np.abs(py) <= MAX_SHIFT)
    return xs + np.where(ok, px, sx), ys + np.where(ok, py, sy)


# ------------------------------------------------------ single-channel API


def _channel(channel) -> np.ndarray:
    z = np.asarray(channel)
    if z.ndim != 2 or z.size == 0:
        raise DimensionError(f"expected a non-empty (H, W) heatmap, got {z.shape}")
    return z[None]


def argmax_decode(channel) -> PeakEstimate:
    z = _channel(channel)
    xs, ys = find_peaks(z)
    return PeakEstimate(float(xs[0]), float(ys[0]), float(z[0, ys[0], xs[0]]))


def _refine_one(channel, peak: PeakEstimate, mode, weights="uniform") -> PeakEstimate:
    z = _channel(channel)
    xs = np.array([int(peak.x)])
    ys = np.array([int(peak.y)])
    x, y = refine_peaks(z, xs, ys, mode, weights=weights)
    return PeakEstimate(float(x[0]), float(y[0]), peak.score)


def quarter_shift(channel, peak: PeakEstimate) -> PeakEstimate:
    """Move 0.25 px towards the larger neighbour on each axis."""
    return _refine_one(channel, peak, Refinement.QUARTER)


def parabola_refine(channel, peak: PeakEstimate) -> PeakEstimate:
    """Per-axis vertex of the parabola through the peak and its two neighbours."""
    return _refine_one(channel, peak, Refinement.PARABOLA)


def paraboloid_refine(channel, peak: PeakEstimate, weights: str = "uniform") -> PeakEstimate:
    """Stationary point of a paraboloid fitted to the 3x3 neighbourhood.

    Falls back to :func:`parabola_refine` at the border, for degenerate fits and
    when the fitted shift leaves the peak pixel.
    """
    return _refine_one(channel, peak, Refinement.PARABOLOID, weights)


# ------------------------------------------------------------ pose decode


def decode_stack(h, opts: DecodeOptions = DecodeOptions()):
    """Decode every channel of ``h`` (shape ``(..., H, W)``).

    Returns ``(xy, scores)`` in heatmap coordinates; ``scores`` is the raw
    (unfiltered) heatmap value at the integer peak.
    """
    h = np.asarray(h)
    lead, (height, width) = h.shape[:-2], h.shape[-2:]
    z = h.reshape(-1, height, width)
    search = gaussian_filter(z, opts.filter_sigma) if opts.gaussian_filter else z
    xs, ys = find_peaks(search)
    x, y = refine_peaks(search, xs, ys, opts.refinement, weights=opts.paraboloid_weights)
    scores = z[np.arange(z.shape[0]), ys, xs].astype(np.float64)
    xy = np.stack([x, y], axis=-1)
    return xy.reshape(*lead, 2), scores.reshape(lead)


def heatmap_to_box(xy, box: DetectionBox, heatmap_size: tuple[int, int]) -> np.ndarray:
    """Map heatmap coordinates into the image through the box (pixel-centre aligned)."""
    height, width = heatmap_size
    xy = np.asarray(xy, dtype=np.float64)
    out = np.empty_like(xy)
    out[..., 0] = box.x + (xy[..., 0] + 0.5) * (box.w / width) - 0.5
    out[..., 1] = box.y + (xy[..., 1] + 0.5) * (box.h / height) - 0.5
    return out


def _pose_from(xy, scores, box: DetectionBox, size) -> Pose:
    scores = np.clip(scores, 0.0, 1.0)
    return Pose(
        xy=heatmap_to_box(xy, box, size),
        scores=scores,
        instance_score=box.score * float(scores.mean()),
        area=box.area,
        image_id=box.image_id,
        bbox=(box.x, box.y, box.w, box.h),
    )


def decode_pose(h, box: DetectionBox, opts: DecodeOptions, spec: SkeletonSpec) -> Pose:
    """Full per-instance decode: optional filter, argmax, refinement, crop-back.

    Keypoint scores are clipped into [0, 1]; the instance score is the box score
    times the mean keypoint score.
    """
    h = as_stack(h)
    if h.shape[0] != spec.num_keypoints:
        raise DimensionError(f"{h.shape[0]} channels for a {spec.num_keypoints}-keypoint skeleton")
    xy, scores = decode_stack(h, opts)
    return _pose_from(xy, scores, box, h.shape[1:])


def decode_batch(stacks, boxes, opts: DecodeOptions, spec: SkeletonSpec) -> list[Pose]:
    """Decode ``(N, C, H, W)`` stacks with one box per instance in a single vectorized pass."""
    stacks = np.asarray(stacks)
    if stacks.ndim != 4:
        raise DimensionError(f"expected (N, C, H, W), got {stacks.shape}")
    if stacks.shape[0] != len(boxes):
        raise DimensionError(f"{stacks.shape[0]} heatmap stacks but {len(boxes)} boxes")
    if stacks.shape[1] != spec.num_keypoints:
        raise DimensionError(f"{stacks.shape[1]} channels for a {spec.num_keypoints}-keypoint skeleton")
    if not np.isfinite(stacks).all():
        raise ValueError("heatmaps contain non-finite values")
    xy, scores = decode_stack(stacks, opts)
    return [_pose_from(xy[n], scores[n], box, stacks.shape[2:]) for n, box in enumerate(boxes)]
