"""Forward pass of Residual Feature Augmentation with explicit weights.

Feature maps are float64 arrays laid out (channels, height, width). The path
from the top backbone stage to the top prediction level is:

    pool at each ratio -> 1x1 projection -> bilinear upsample to input size
    -> adaptive spatial fusion -> add lateral feature -> 3x3 conv
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .errors import ConfigurationError, ShapeError

__all__ = [
    "RfaConfig",
    "RfaWeights",
    "adaptive_avg_pool",
    "pooled_size",
    "conv2d",
    "bilinear_upsample",
    "asf_fuse",
    "rfa_forward",
]


@dataclass(frozen=True)
class RfaConfig:
    ratios: tuple = (0.1, 0.2, 0.3)
    out_channels: int = 256
    asf_hidden: int | None = None

    def __post_init__(self):
        r = tuple(float(v) for v in self.ratios)
        if not r or any(not (0 < v <= 1) for v in r):
            raise ConfigurationError("pooling ratios must lie in (0, 1]")
        if any(b <= a for a, b in zip(r, r[1:])):
            raise ConfigurationError("pooling ratios must be strictly increasing")
        object.__setattr__(self, "ratios", r)
        if int(self.out_channels) != self.out_channels or self.out_channels < 1:
            raise ConfigurationError("out_channels must be a positive integer")
        if self.asf_hidden is None:
            object.__setattr__(self, "asf_hidden", max(1, self.out_channels // 2))
        elif int(self.asf_hidden) != self.asf_hidden or self.asf_hidden < 1:
            raise ConfigurationError("asf_hidden must be a positive integer")


@dataclass
class RfaWeights:
    proj_kernels: list      # per ratio, (out, in, 1, 1)
    proj_biases: list       # per ratio, (out,)
    asf_kernel1: np.ndarray  # (hidden, n_ratios * out, 1, 1)
    asf_bias1: np.ndarray
    asf_kernel2: np.ndarray  # (n_ratios, hidden, 3, 3)
    asf_bias2: np.ndarray
    out_kernel: np.ndarray   # (out, out, 3, 3)
    out_bias: np.ndarray

    def check(self, cfg: RfaConfig, in_channels: int):
        m, o, h = len(cfg.ratios), cfg.out_channels, cfg.asf_hidden
        expected = {
            "asf_kernel1": (h, m * o, 1, 1),
            "asf_bias1": (h,),
            "asf_kernel2": (m, h, 3, 3),
            "asf_bias2": (m,),
            "out_kernel": (o, o, 3, 3),
            "out_bias": (o,),
        }
        if len(self.proj_kernels) != m or len(self.proj_biases) != m:
            raise ShapeError(f"need {m} projection kernels")
        for kern, bias in zip(self.proj_kernels, self.proj_biases):
            if np.shape(kern) != (o, in_channels, 1, 1) or np.shape(bias) != (o,):
                raise ShapeError(f"projection kernel {np.shape(kern)} != {(o, in_channels, 1, 1)}")
        for name, shape in expected.items():
            if np.shape(getattr(self, name)) != shape:
                raise ShapeError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")

    @classmethod
    def random(cls, cfg: RfaConfig, in_channels: int, rng=None, scale: float = 0.1) -> "RfaWeights":
        rng = np.random.default_rng(rng)
        m, o, h = len(cfg.ratios), cfg.out_channels, cfg.asf_hidden
        return cls(
            proj_kernels=[rng.normal(0, scale, (o, in_channels, 1, 1)) for _ in range(m)],
            proj_biases=[rng.normal(0, scale, o) for _ in range(m)],
            asf_kernel1=rng.normal(0, scale, (h, m * o, 1, 1)),
            asf_bias1=rng.normal(0, scale, h),
            asf_kernel2=rng.normal(0, scale, (m, h, 3, 3)),
            asf_bias2=rng.normal(0, scale, m),
            out_kernel=rng.normal(0, scale, (o, o, 3, 3)),
            out_bias=rng.normal(0, scale, o),
        )

    def tensors(self) -> dict:
        """Flat name -> array mapping, used for serialization."""
        out = {}
        for i, (k, b) in enumerate(zip(self.proj_kernels, self.proj_biases)):
            out[f"proj_kernel_{i}"] = np.asarray(k)
            out[f"proj_bias_{i}"] = np.asarray(b)
        for name in ("asf_kernel1", "asf_bias1", "asf_kernel2", "asf_bias2", "out_kernel", "out_bias"):
            out[name] = np.asarray(getattr(self, name))
        return out

    @classmethod
    def from_tensors(cls, t: dict) -> "RfaWeights":
        m = sum(1 for name in t if name.startswith("proj_kernel_"))
        return cls(
            proj_kernels=[t[f"proj_kernel_{i}"] for i in range(m)],
            proj_biases=[t[f"proj_bias_{i}"] for i in range(m)],
            **{name: t[name] for name in ("asf_kernel1", "asf_bias1", "asf_kernel2",
                                          "asf_bias2", "out_kernel", "out_bias")},
        )


def _as_feature(f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3 or min(f.shape) < 1:
        raise ShapeError(f"feature map must be (C, H, W) with positive sizes, got {f.shape}")
    return f


def pooled_size(size: int, ratio: float) -> int:
    # round half up, never below one cell
    return max(1, int(math.floor(ratio * size + 0.5)))


def _adaptive_bins(n_in: int, n_out: int) -> list:
    return [((i * n_in) // n_out, -((-(i + 1) * n_in) // n_out)) for i in range(n_out)]


def adaptive_avg_pool(f, ratio: float) -> np.ndarray:
    f = _as_feature(f)
    if not 0 < ratio <= 1:
        raise ConfigurationError("pooling ratio must lie in (0, 1]")
    _, h, w = f.shape
    rows = _adaptive_bins(h, pooled_size(h, ratio))
    cols = _adaptive_bins(w, pooled_size(w, ratio))
    out = np.empty((f.shape[0], len(rows), len(cols)))
    for i, (r0, r1) in enumerate(rows):
        band = f[:, r0:r1]
        for j, (c0, c1) in enumerate(cols):
            out[:, i, j] = band[:, :, c0:c1].mean(axis=(1, 2))
    return out


def conv2d(f, kernel, bias) -> np.ndarray:
    """Stride-1 cross-correlation with a (out, in, s, s) kernel, s in {1, 3}; 3x3 zero-pads by 1."""
    f = _as_feature(f)
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3] or kernel.shape[2] not in (1, 3):
        raise ShapeError(f"kernel must be (out, in, 1|3, 1|3), got {kernel.shape}")
    if kernel.shape[1] != f.shape[0]:
        raise ShapeError(f"kernel expects {kernel.shape[1]} input channels, feature has {f.shape[0]}")
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({kernel.shape[0]},)")
    s = kernel.shape[2]
    _, h, w = f.shape
    if s == 1:
        out = np.einsum("oc,chw->ohw", kernel[:, :, 0, 0], f)
    else:
        padded = np.pad(f, ((0, 0), (1, 1), (1, 1)))
        out = np.zeros((kernel.shape[0], h, w))
        for dy in range(3):
            for dx in range(3):
                out += np.einsum("oc,chw->ohw", kernel[:, :, dy, dx], padded[:, dy:dy + h, dx:dx + w])
    return out + bias[:, None, None]


def _interp_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_upsample(f, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resampling to (out_h, out_w)."""
    f = _as_feature(f)
    if out_h < 1 or out_w < 1:
        raise ShapeError("output size must be positive")
    _, h, w = f.shape
    y0, y1, fy = _interp_axis(h, out_h)
    x0, x1, fx = _interp_axis(w, out_w)
    top = f[:, y0][:, :, x0] * (1 - fx) + f[:, y0][:, :, x1] * fx
    bottom = f[:, y1][:, :, x0] * (1 - fx) + f[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def asf_weights(features: list, w: RfaWeights) -> np.ndarray:
    """Per-pixel softmax fusion weights, shape (n_branches, H, W)."""
    stacked = np.concatenate([_as_feature(x) for x in features], axis=0)
    hidden = conv2d(stacked, w.asf_kernel1, w.asf_bias1)
    logits = conv2d(hidden, w.asf_kernel2, w.asf_bias2)
    return softmax(logits, axis=0)


def asf_fuse(features: list, w: RfaWeights) -> np.ndarray:
    """Adaptive spatial fusion: convex per-pixel combination of equal-shape branches."""
    features = [_as_feature(x) for x in features]
    if len({x.shape for x in features}) != 1:
        raise ShapeError(f"fusion inputs differ in shape: {[x.shape for x in features]}")
    if len(features) != w.asf_kernel2.shape[0]:
        raise ShapeError(f"{len(features)} branches but weights produce {w.asf_kernel2.shape[0]} maps")
    weights = asf_weights(features, w)
    return sum(weights[i][None] * x for i, x in enumerate(features))


def rfa_forward(c5, lateral_p5, w: RfaWeights, cfg: RfaConfig) -> np.ndarray:
    c5 = _as_feature(c5)
    lateral_p5 = _as_feature(lateral_p5)
    _, h, wd = c5.shape
    if lateral_p5.shape != (cfg.out_channels, h, wd):
        raise ShapeError(f"lateral feature {lateral_p5.shape} != {(cfg.out_channels, h, wd)}")
    w.check(cfg, c5.shape[0])
    contexts = []
    for ratio, kern, bias in zip(cfg.ratios, w.proj_kernels, w.proj_biases):
        pooled = adaptive_avg_pool(c5, ratio)
        contexts.append(bilinear_upsample(conv2d(pooled, kern, bias), h, wd))
    residual = asf_fuse(contexts, w)
    return conv2d(lateral_p5 + residual, w.out_kernel, w.out_bias)
