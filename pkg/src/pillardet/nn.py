"""Minimal NCHW float32 compute: conv, batchnorm, rectifier, pooling, and the
three-branch reparameterizable block with its exact single-conv fusion.

A rep unit trains as Conv3x3-BN + Conv1x1-BN (+ Identity-BN when shapes
allow), with the rectifier applied after the branch sum. Fusion folds each
BN into its branch, aligns every branch to a 3x3 kernel, and sums; fused and
train-time forwards agree up to float rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ValidationError

FLOAT = np.float32


def _freeze(arr, dtype=FLOAT) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(arr, dtype=dtype))
    if not np.isfinite(a).all():
        raise ValidationError("parameters must be finite")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ConvParams:
    """Cross-correlation kernel (c_out, c_in, k, k) with bias; padding = k // 2."""

    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1

    def __post_init__(self):
        kernel = _freeze(self.kernel)
        if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3] or kernel.shape[2] not in (1, 3):
            raise ValidationError(f"kernel must be (c_out, c_in, k, k) with k in {{1, 3}}, got {kernel.shape}")
        bias = _freeze(self.bias)
        if bias.shape != (kernel.shape[0],):
            raise ValidationError(f"bias must have shape ({kernel.shape[0]},), got {bias.shape}")
        if self.stride not in (1, 2):
            raise ValidationError(f"stride must be 1 or 2, got {self.stride}")
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "bias", bias)

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def ksize(self) -> int:
        return self.kernel.shape[2]

    @property
    def padding(self) -> int:
        return self.ksize // 2


@dataclass(frozen=True)
class BNParams:
    """Per-channel normalization: gamma, beta, running mean/var, epsilon.

    Statistics are held in float64 so folding them into a conv stays exact
    to the final float32 rounding.
    """

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        c = np.asarray(self.gamma).shape[0]
        for name in ("gamma", "beta", "mean", "var"):
            arr = _freeze(getattr(self, name), dtype=np.float64)
            if arr.shape != (c,):
                raise ValidationError(f"bn {name} must have shape ({c},)")
            object.__setattr__(self, name, arr)
        if np.any(self.var < 0.0):
            raise ValidationError("bn running variance must be >= 0")
        if not self.eps > 0.0:
            raise ValidationError("bn epsilon must be > 0")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    # dyadic epsilon: var + eps is exactly 1.0 in float64, so neutral
    # statistics scale by exactly 1
    NEUTRAL_EPS = 2.0 ** -17

    @classmethod
    def neutral(cls, channels: int, eps: float | None = None) -> "BNParams":
        """Statistics that make the layer an exact identity (var = 1 - eps)."""
        eps = cls.NEUTRAL_EPS if eps is None else eps
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            mean=np.zeros(channels),
            var=np.full(channels, 1.0 - eps),
            eps=eps,
        )


def check_tensor(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValidationError(f"expected an (n, c, h, w) tensor, got shape {x.shape}")
    return x.astype(FLOAT, copy=False)


def conv2d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Standard cross-correlation, padding k // 2; float32 in, float32 out."""
    x = check_tensor(x)
    n, ci, h, w = x.shape
    if ci != p.in_channels:
        raise ValidationError(f"input has {ci} channels, conv expects {p.in_channels}")
    k, pad, s = p.ksize, p.padding, p.stride
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    n_, _, ho, wo, _, _ = win.shape
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, ci * k * k)
    out = cols @ p.kernel.reshape(p.out_channels, ci * k * k).T
    out += p.bias
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def batchnorm(x: np.ndarray, bn: BNParams) -> np.ndarray:
    """Inference-mode normalization with the stored running statistics."""
    x = check_tensor(x)
    if x.shape[1] != bn.channels:
        raise ValidationError(f"input has {x.shape[1]} channels, bn expects {bn.channels}")
    scale64 = bn.gamma / np.sqrt(bn.var + bn.eps)
    scale = scale64.astype(FLOAT)
    shift = (bn.beta - bn.mean * scale64).astype(FLOAT)
    return x * scale[:, None, None] + shift[:, None, None]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, FLOAT(0))


def maxpool2(x: np.ndarray) -> np.ndarray:
    """2x2 stride-2 max pooling; spatial dims must be even."""
    x = check_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValidationError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def upsample_nearest2(x: np.ndarray) -> np.ndarray:
    x = check_tensor(x)
    return x.repeat(2, axis=2).repeat(2, axis=3)


def bn_fold(conv: ConvParams, bn: BNParams) -> ConvParams:
    """Absorb the BN into the conv: w' = w * g / sqrt(v + eps), b' matching."""
    if bn.channels != conv.out_channels:
        raise ValidationError("bn channel count must match conv output channels")
    scale = bn.gamma / np.sqrt(bn.var + bn.eps)
    kernel = conv.kernel.astype(np.float64) * scale[:, None, None, None]
    bias = bn.beta + (conv.bias.astype(np.float64) - bn.mean) * scale
    return ConvParams(kernel, bias, stride=conv.stride)


def pad_1x1_to_3x3(p: ConvParams) -> ConvParams:
    """Embed a 1x1 kernel at the center of a zero 3x3 kernel."""
    if p.ksize != 1:
        raise ValidationError(f"expected a 1x1 conv, got k={p.ksize}")
    kernel = np.zeros((p.out_channels, p.in_channels, 3, 3), dtype=p.kernel.dtype)
    kernel[:, :, 1, 1] = p.kernel[:, :, 0, 0]
    return ConvParams(kernel, p.bias, stride=p.stride)


def identity_to_3x3(channels: int) -> ConvParams:
    """Dirac kernel: conv with it reproduces the input exactly."""
    kernel = np.zeros((channels, channels, 3, 3), dtype=FLOAT)
    kernel[np.arange(channels), np.arange(channels), 1, 1] = 1.0
    return ConvParams(kernel, np.zeros(channels), stride=1)


@dataclass(frozen=True)
class RepBlockParams:
    """Three-branch train-time unit: 3x3 + 1x1 (+ identity) each with BN."""

    conv3: ConvParams
    bn3: BNParams
    conv1: ConvParams
    bn1: BNParams
    bn_id: BNParams | None = None

    def __post_init__(self):
        if self.conv3.ksize != 3 or self.conv1.ksize != 1:
            raise ValidationError("rep unit needs a 3x3 and a 1x1 branch")
        same_io = (
            self.conv3.in_channels == self.conv1.in_channels
            and self.conv3.out_channels == self.conv1.out_channels
            and self.conv3.stride == self.conv1.stride
        )
        if not same_io:
            raise ValidationError("rep unit branches disagree on shape or stride")
        if self.bn3.channels != self.conv3.out_channels or self.bn1.channels != self.conv1.out_channels:
            raise ValidationError("rep unit BN widths must match branch outputs")
        if self.bn_id is not None:
            if self.conv3.in_channels != self.conv3.out_channels or self.conv3.stride != 1:
                raise ValidationError("identity branch requires c_in == c_out and stride 1")
            if self.bn_id.channels != self.conv3.out_channels:
                raise ValidationError("identity BN width must match the unit output")

    @property
    def in_channels(self) -> int:
        return self.conv3.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv3.out_channels

    @property
    def stride(self) -> int:
        return self.conv3.stride


def rep_forward(x: np.ndarray, b: RepBlockParams) -> np.ndarray:
    """Train-time forward: rectifier after the three-branch sum."""
    acc = batchnorm(conv2d(x, b.conv3), b.bn3)
    acc = acc + batchnorm(conv2d(x, b.conv1), b.bn1)
    if b.bn_id is not None:
        acc = acc + batchnorm(x, b.bn_id)
    return relu(acc)


def fuse_rep_block(b: RepBlockParams) -> ConvParams:
    """Collapse the three branches into one 3x3 conv (exact algebra)."""
    f3 = bn_fold(b.conv3, b.bn3)
    f1 = pad_1x1_to_3x3(bn_fold(b.conv1, b.bn1))
    kernel = f3.kernel.astype(np.float64) + f1.kernel.astype(np.float64)
    bias = f3.bias.astype(np.float64) + f1.bias.astype(np.float64)
    if b.bn_id is not None:
        fid = bn_fold(identity_to_3x3(b.out_channels), b.bn_id)
        kernel += fid.kernel.astype(np.float64)
        bias += fid.bias.astype(np.float64)
    return ConvParams(kernel, bias, stride=b.stride)


def fused_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Inference-time forward of a fused unit."""
    return relu(conv2d(x, p))


def unit_forward(x: np.ndarray, unit) -> np.ndarray:
    """Run one unit in whichever mode its parameters are in."""
    if isinstance(unit, RepBlockParams):
        return rep_forward(x, unit)
    if isinstance(unit, ConvParams):
        return fused_forward(x, unit)
    raise ValidationError(f"unknown unit type {type(unit).__name__}")


def random_rep_block(
    rng: np.random.Generator, c_in: int, c_out: int, stride: int = 1, with_identity: bool | None = None
) -> RepBlockParams:
    """Random unit with sane magnitudes; identity branch added where legal."""
    def bn(c):
        return BNParams(
            gamma=rng.uniform(0.5, 1.5, c),
            beta=rng.normal(0.0, 0.2, c),
            mean=rng.normal(0.0, 0.2, c),
            var=rng.uniform(0.5, 1.5, c),
        )

    if with_identity is None:
        with_identity = c_in == c_out and stride == 1
    if with_identity and (c_in != c_out or stride != 1):
        raise ValidationError("identity branch requires c_in == c_out and stride 1")
    k3 = rng.normal(0.0, 1.0, (c_out, c_in, 3, 3)) / np.sqrt(9.0 * c_in)
    k1 = rng.normal(0.0, 1.0, (c_out, c_in, 1, 1)) / np.sqrt(c_in)
    return RepBlockParams(
        conv3=ConvParams(k3, rng.normal(0.0, 0.1, c_out), stride=stride),
        bn3=bn(c_out),
        conv1=ConvParams(k1, rng.normal(0.0, 0.1, c_out), stride=stride),
        bn1=bn(c_out),
        bn_id=bn(c_out) if with_identity else None,
    )


def passthrough_rep_block(c_in: int, c_out: int, stride: int = 1) -> RepBlockParams:
    """Deterministic unit that forwards (rectified) input channels.

    With c_in == c_out and stride 1 the fused kernel is the exact Dirac
    identity; otherwise channels are cycled through a center-tap kernel.
    """
    if c_in == c_out and stride == 1:
        k3 = np.zeros((c_out, c_in, 3, 3))
    else:
        k3 = np.zeros((c_out, c_in, 3, 3))
        k3[np.arange(c_out), np.arange(c_out) % c_in, 1, 1] = 1.0
    return RepBlockParams(
        conv3=ConvParams(k3, np.zeros(c_out), stride=stride),
        bn3=BNParams.neutral(c_out),
        conv1=ConvParams(np.zeros((c_out, c_in, 1, 1)), np.zeros(c_out), stride=stride),
        bn1=BNParams.neutral(c_out),
        bn_id=BNParams.neutral(c_out) if (c_in == c_out and stride == 1) else None,
    )
