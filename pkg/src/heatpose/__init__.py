"""Top-down pose post-processing: heatmap encoding/decoding, OKS NMS and evaluation."""

from .heatmap_codec import (
    EncodeConfig,
    combined_loss,
    encode_all_zero,
    encode_gaussian,
    flip_fuse_ssp,
    gaussian_filter,
    mse_loss,
)
from .metrics import EvalReport, evaluate, oks_gt
from .model import (
    DetectionBox,
    DimensionError,
    Keypoint,
    Pose,
    SkeletonSpec,
    Visibility,
    box_intersects,
    coco_skeleton,
    load_skeleton,
    validate_pose,
)
from .pose_nms import NmsConfig, hard_nms, oks_iou, soft_nms
from .subpixel import DecodeOptions, Refinement, decode_batch, decode_pose

__version__ = "0.1.0"

__all__ = [
    "DecodeOptions",
    "DetectionBox",
    "DimensionError",
    "EncodeConfig",
    "EvalReport",
    "Keypoint",
    "NmsConfig",
    "Pose",
    "Refinement",
    "SkeletonSpec",
    "Visibility",
    "box_intersects",
    "coco_skeleton",
    "combined_loss",
    "decode_batch",
    "decode_pose",
    "encode_all_zero",
    "encode_gaussian",
    "evaluate",
    "flip_fuse_ssp",
    "gaussian_filter",
    "hard_nms",
    "load_skeleton",
    "mse_loss",
    "oks_gt",
    "oks_iou",
    "soft_nms",
    "validate_pose",
]
