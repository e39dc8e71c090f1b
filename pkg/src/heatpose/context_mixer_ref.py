"""Forward-only NumPy reference of the context-mixer decoder.

One context-mixer (CM) stage takes a ``(C_in, H, W)`` feature map to
``(C_out, 2H, 2W)`` through three branches:

* residual: 2x upsample, 1x1 conv, batch-norm;
* squeeze-excitation: global average pool, 1x1 conv to ``C_out/4`` + ReLU,
  1x1 conv to ``C_out``, sigmoid -> per-channel gate ``alpha``;
* hybrid dilated: four 3x3 convs (dilation 1..4, ``C_out/4`` filters each,
  batch-norm + ReLU), concatenated, then a stride-2 transposed conv + batch-norm.

and combines them as ``relu(hdc * alpha + res)``. Batch-norm always runs in
inference mode with the stored moments. Nothing here trains.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .heatmap_codec import combined_loss, mse_loss
from .model import DimensionError
from .pipeline import FormatError

__all__ = [
    "DILATIONS",
    "Conv",
    "BatchNorm",
    "CmParams",
    "conv2d",
    "conv_transpose2d",
    "upsample2x",
    "sigmoid",
    "cm_forward",
    "ccm_forward",
    "aux_decoder_loss",
    "random_cm_params",
    "random_conv",
    "ccm_state_dict",
    "ccm_from_state_dict",
    "save_params",
    "load_params",
]

DILATIONS = (1, 2, 3, 4)


@dataclass(frozen=True)
class Conv:
    """Convolution weights: ``(C_out, C_in, kh, kw)`` plus ``(C_out,)`` bias.

    Transposed convolutions use the same container with weight laid out as
    ``(C_in, C_out, kh, kw)``.
    """

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weight", np.asarray(self.weight, dtype=np.float64))
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float64))
        if self.weight.ndim != 4:
            raise DimensionError(f"conv weight must be 4-D, got {self.weight.shape}")


@dataclass(frozen=True)
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("gamma", "beta", "mean", "var"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    @classmethod
    def identity(cls, channels: int, eps: float = 1e-5) -> "BatchNorm":
        """Parameters under which the layer is exactly the identity map."""
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.full(channels, 1.0 - eps), eps)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        scale = self.gamma / np.sqrt(self.var + self.eps)
        return x * scale[:, None, None] + (self.beta - self.mean * scale)[:, None, None]


@dataclass(frozen=True)
class CmParams:
    res: Conv
    res_bn: BatchNorm
    se_reduce: Conv
    se_expand: Conv
    hdc: tuple[Conv, Conv, Conv, Conv]
    hdc_bn: tuple[BatchNorm, BatchNorm, BatchNorm, BatchNorm]
    deconv: Conv
    deconv_bn: BatchNorm
    upsample: str = "nearest"

    @property
    def in_channels(self) -> int:
        return self.res.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.res.weight.shape[0]

    def __post_init__(self):
        c_in, c_out = self.in_channels, self.out_channels
        if self.res.weight.shape[2:] != (1, 1):
            raise DimensionError("residual conv must be 1x1")
        if c_out % 4:
            raise DimensionError(f"output channels ({c_out}) must be divisible by 4")
        q = c_out // 4
        if self.se_reduce.weight.shape != (q, c_in, 1, 1) or self.se_expand.weight.shape != (c_out, q, 1, 1):
            raise DimensionError("squeeze-excitation convs must be 1x1 with a C_out/4 bottleneck")
        if len(self.hdc) != len(DILATIONS) or len(self.hdc_bn) != len(DILATIONS):
            raise DimensionError("need exactly four dilated branches")
        for conv in self.hdc:
            if conv.weight.shape != (q, c_in, 3, 3):
                raise DimensionError(f"dilated conv must be ({q}, {c_in}, 3, 3), got {conv.weight.shape}")
        k = self.deconv.weight.shape[2]
        if self.deconv.weight.shape != (c_out, c_out, k, k) or k % 2 or k < 2:
            raise DimensionError("deconv must map C_out -> C_out with an even square kernel")
        if self.upsample not in ("nearest", "bilinear"):
            raise ValueError(f"unknown upsample mode {self.upsample!r}")


# ---------------------------------------------------------------- layers


def conv2d(x: np.ndarray, conv: Conv, dilation: int = 1) -> np.ndarray:
    """Zero-padded 'same' convolution (cross-correlation) with odd kernels."""
    w = conv.weight
    c_out, c_in, kh, kw = w.shape
    if x.shape[0] != c_in:
        raise DimensionError(f"conv expects {c_in} input channels, got {x.shape[0]}")
    _, h, wd = x.shape
    ph, pw = dilation * (kh // 2), dilation * (kw // 2)
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((c_out, h, wd))
    for u in range(kh):
        for v in range(kw):
            win = xp[:, u * dilation : u * dilation + h, v * dilation : v * dilation + wd]
            out += np.tensordot(w[:, :, u, v], win, axes=1)
    return out + conv.bias[:, None, None]


def conv_transpose2d(x: np.ndarray, conv: Conv, stride: int = 2) -> np.ndarray:
    """Transposed convolution with padding ``(k - stride) / 2``: output is exactly ``stride`` times larger."""
    w = conv.weight
    c_in, c_out, k, _ = w.shape
    if x.shape[0] != c_in:
        raise DimensionError(f"deconv expects {c_in} input channels, got {x.shape[0]}")
    _, h, wd = x.shape
    pad = (k - stride) // 2
    full = np.zeros((c_out, (h - 1) * stride + k, (wd - 1) * stride + k))
    for u in range(k):
        for v in range(k):
            contrib = np.tensordot(w[:, :, u, v].T, x, axes=1)
            full[:, u : u + (h - 1) * stride + 1 : stride, v : v + (wd - 1) * stride + 1 : stride] += contrib
    out = full[:, pad : pad + h * stride, pad : pad + wd * stride]
    return out + conv.bias[:, None, None]


def _bilinear_axis(n: int):
    src = np.clip((np.arange(2 * n) + 0.5) / 2 - 0.5, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    return lo, hi, src - lo


def upsample2x(x: np.ndarray, mode: str = "nearest") -> np.ndarray:
    if mode == "nearest":
        return x.repeat(2, axis=1).repeat(2, axis=2)
    lo, hi, t = _bilinear_axis(x.shape[1])
    x = x[:, lo] * (1 - t)[:, None] + x[:, hi] * t[:, None]
    lo, hi, t = _bilinear_axis(x.shape[2])
    return x[:, :, lo] * (1 - t) + x[:, :, hi] * t


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def _relu(x):
    return np.maximum(x, 0.0)


# -------------------------------------------------------------- forward


def cm_forward(f_prev, p: CmParams, return_parts: bool = False):
    """One context-mixer stage; doubles the spatial size.

    With ``return_parts=True`` also returns a dict holding the ``res``,
    ``alpha`` and ``hdc`` branch outputs.
    """
    f_prev = np.asarray(f_prev, dtype=np.float64)
    if f_prev.ndim != 3 or f_prev.shape[0] != p.in_channels:
        raise DimensionError(f"stage expects ({p.in_channels}, H, W) input, got {f_prev.shape}")
    if not np.isfinite(f_prev).all():
        raise ValueError("feature map contains non-finite values")

    res = p.res_bn(conv2d(upsample2x(f_prev, p.upsample), p.res))

    pooled = f_prev.mean(axis=(1, 2))
    squeezed = _relu(p.se_reduce.weight[:, :, 0, 0] @ pooled + p.se_reduce.bias)
    alpha = sigmoid(p.se_expand.weight[:, :, 0, 0] @ squeezed + p.se_expand.bias)

    branches = [_relu(bn(conv2d(f_prev, c, d))) for c, bn, d in zip(p.hdc, p.hdc_bn, DILATIONS)]
    hdc = p.deconv_bn(conv_transpose2d(np.concatenate(branches, axis=0), p.deconv))

    out = _relu(hdc * alpha[:, None, None] + res)
    if return_parts:
        return out, {"res": res, "alpha": alpha, "hdc": hdc}
    return out


def ccm_forward(f_enc, stages: Sequence[CmParams], predictor: Conv) -> np.ndarray:
    """Cascade of CM stages followed by the 1x1 heatmap predictor."""
    f = np.asarray(f_enc, dtype=np.float64)
    for k, stage in enumerate(stages):
        if f.shape[0] != stage.in_channels:
            raise DimensionError(f"stage {k} expects {stage.in_channels} channels, got {f.shape[0]}")
        f = cm_forward(f, stage)
    if predictor.weight.shape[2:] != (1, 1):
        raise DimensionError("predictor must be a 1x1 conv")
    return conv2d(f, predictor)


def aux_decoder_loss(h_main, h_aux, h_gt, lam: float) -> float:
    """Training objective with the auxiliary decoder: main MSE + lam * auxiliary MSE."""
    return combined_loss(mse_loss(h_main, h_gt), mse_loss(h_aux, h_gt), lam)


# ------------------------------------------------------------- fixtures


def random_conv(rng, c_out, c_in, k=1, scale=0.1) -> Conv:
    return Conv(rng.normal(0, scale, (c_out, c_in, k, k)), rng.normal(0, scale, c_out))


def _random_bn(rng, c) -> BatchNorm:
    return BatchNorm(rng.uniform(0.5, 1.5, c), rng.normal(0, 0.1, c), rng.normal(0, 0.1, c), rng.uniform(0.5, 1.5, c))


def random_cm_params(rng, c_in: int, c_out: int, deconv_kernel: int = 4, scale: float = 0.1,
                     upsample: str = "nearest") -> CmParams:
    """Seeded pseudo-random stage parameters for tests and benchmarks."""
    q = c_out // 4
    return CmParams(
        res=random_conv(rng, c_out, c_in, 1, scale),
        res_bn=_random_bn(rng, c_out),
        se_reduce=random_conv(rng, q, c_in, 1, scale),
        se_expand=random_conv(rng, c_out, q, 1, scale),
        hdc=tuple(random_conv(rng, q, c_in, 3, scale) for _ in DILATIONS),
        hdc_bn=tuple(_random_bn(rng, q) for _ in DILATIONS),
        deconv=Conv(rng.normal(0, scale, (c_out, c_out, deconv_kernel, deconv_kernel)), rng.normal(0, scale, c_out)),
        deconv_bn=_random_bn(rng, c_out),
        upsample=upsample,
    )


# ------------------------------------------------------- parameter files

_PARAM_MAGIC = b"HMP1"


def save_params(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 tensors.

    Layout (little-endian): magic ``HMP1``, uint32 entry count, then per entry
    uint32 name length, UTF-8 name, uint32 rank, rank x uint32 dims, float32 data.
    """
    parts = [_PARAM_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_params(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != _PARAM_MAGIC:
        raise FormatError(f"{path}: bad parameter-file magic {buf[:4]!r}")
    try:
        (count,), pos = struct.unpack_from("<I", buf, 4), 8
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", buf, pos)
            shape = struct.unpack_from(f"<{ndim}I", buf, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise FormatError(f"{path}: tensor {name!r} is truncated")
            out[name] = np.frombuffer(buf, "<f4", size, pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except struct.error:
        raise FormatError(f"{path}: truncated parameter file") from None
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def _bn_entries(prefix, bn):
    return {f"{prefix}.{k}": getattr(bn, k) for k in ("gamma", "beta", "mean", "var")} | {
        f"{prefix}.eps": np.array([bn.eps])
    }


def ccm_state_dict(stages: Sequence[CmParams], predictor: Conv) -> dict[str, np.ndarray]:
    d: dict[str, np.ndarray] = {}
    for k, s in enumerate(stages):
        p = f"stage{k}"
        for name in ("res", "se_reduce", "se_expand", "deconv"):
            conv = getattr(s, name)
            d[f"{p}.{name}.weight"], d[f"{p}.{name}.bias"] = conv.weight, conv.bias
        for i, (conv, bn) in enumerate(zip(s.hdc, s.hdc_bn)):
            d[f"{p}.hdc{i}.weight"], d[f"{p}.hdc{i}.bias"] = conv.weight, conv.bias
            d.update(_bn_entries(f"{p}.hdc{i}_bn", bn))
        d.update(_bn_entries(f"{p}.res_bn", s.res_bn))
        d.update(_bn_entries(f"{p}.deconv_bn", s.deconv_bn))
    d["predictor.weight"], d["predictor.bias"] = predictor.weight, predictor.bias
    return d


def ccm_from_state_dict(d: dict[str, np.ndarray], upsample: str = "nearest"):
    """Rebuild ``(stages, predictor)`` from :func:`ccm_state_dict` output."""

    def conv(name):
        return Conv(d[f"{name}.weight"], d[f"{name}.bias"])

    def bn(name):
        return BatchNorm(*(d[f"{name}.{k}"] for k in ("gamma", "beta", "mean", "var")), float(d[f"{name}.eps"][0]))

    stages = []
    k = 0
    while f"stage{k}.res.weight" in d:
        p = f"stage{k}"
        stages.append(
            CmParams(
                res=conv(f"{p}.res"),
                res_bn=bn(f"{p}.res_bn"),
                se_reduce=conv(f"{p}.se_reduce"),
                se_expand=conv(f"{p}.se_expand"),
                hdc=tuple(conv(f"{p}.hdc{i}") for i in range(4)),
                hdc_bn=tuple(bn(f"{p}.hdc{i}_bn") for i in range(4)),
                deconv=conv(f"{p}.deconv"),
                deconv_bn=bn(f"{p}.deconv_bn"),
                upsample=upsample,
            )
        )
        k += 1
    return stages, conv("predictor")
