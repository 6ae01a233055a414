"""Pillar feature encoder: per-point MLP, max pooling, attention pooling.

Each pillar's points are lifted to D dims by an affine map with folded
normalization statistics and a rectifier, then reduced two ways: a channel
max, and a per-channel softmax-weighted sum over the points (scores sum to 1
per channel). The pillar feature is the mean of the two reductions. Both the
forward pass and exact analytic gradients are provided; everything is a pure
function of its inputs, so pillars can be encoded concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .pillars import AUGMENTED_DIM


@dataclass(frozen=True)
class EncoderParams:
    """Point-lift affine + normalization constants, and the score affine."""

    weight: np.ndarray  # (D, in_dim)
    bias: np.ndarray  # (D,)
    norm_gamma: np.ndarray  # (D,)
    norm_beta: np.ndarray  # (D,)
    norm_mean: np.ndarray  # (D,)
    norm_var: np.ndarray  # (D,)
    score_weight: np.ndarray  # (D, D)
    score_bias: np.ndarray  # (D,)
    norm_eps: float = 1e-5

    def __post_init__(self):
        d, d_in = np.asarray(self.weight).shape
        for name in ("bias", "norm_gamma", "norm_beta", "norm_mean", "norm_var", "score_bias"):
            arr = np.asarray(getattr(self, name))
            if arr.shape != (d,):
                raise ValidationError(f"encoder {name} must have shape ({d},), got {arr.shape}")
        if np.asarray(self.score_weight).shape != (d, d):
            raise ValidationError("encoder score_weight must be square (D, D)")
        arrays = (self.weight, self.bias, self.norm_gamma, self.norm_beta,
                  self.norm_mean, self.norm_var, self.score_weight, self.score_bias)
        if not all(np.isfinite(a).all() for a in arrays):
            raise ValidationError("encoder parameters must be finite")
        if np.any(np.asarray(self.norm_var) < 0.0) or self.norm_eps <= 0.0:
            raise ValidationError("norm_var must be >= 0 and norm_eps > 0")
        for f, name in zip(arrays, ("weight", "bias", "norm_gamma", "norm_beta", "norm_mean",
                                    "norm_var", "score_weight", "score_bias")):
            a = np.ascontiguousarray(np.asarray(f, dtype=np.float64))
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def identity(cls, dim: int = AUGMENTED_DIM) -> "EncoderParams":
        """Unit affine with inactive normalization and zero score logits."""
        eps = 1e-5
        return cls(
            weight=np.eye(dim),
            bias=np.zeros(dim),
            norm_gamma=np.ones(dim),
            norm_beta=np.zeros(dim),
            norm_mean=np.zeros(dim),
            norm_var=np.full(dim, 1.0 - eps),
            score_weight=np.zeros((dim, dim)),
            score_bias=np.zeros(dim),
            norm_eps=eps,
        )

    @classmethod
    def random(cls, rng: np.random.Generator, dim: int, in_dim: int = AUGMENTED_DIM) -> "EncoderParams":
        return cls(
            weight=rng.normal(0.0, 0.4, (dim, in_dim)),
            bias=rng.normal(0.0, 0.2, dim),
            norm_gamma=rng.uniform(0.5, 1.5, dim),
            norm_beta=rng.normal(0.0, 0.2, dim),
            norm_mean=rng.normal(0.0, 0.2, dim),
            norm_var=rng.uniform(0.5, 1.5, dim),
            score_weight=rng.normal(0.0, 0.4, (dim, dim)),
            score_bias=rng.normal(0.0, 0.2, dim),
        )


@dataclass(frozen=True)
class PillarFeature:
    """Encoded pillar feature with optional per-stage intermediates."""

    f: np.ndarray
    f_max: np.ndarray | None = None
    f_att: np.ndarray | None = None
    scores: np.ndarray | None = None
    encoded: np.ndarray | None = None


def _check_points(aug: np.ndarray, params: EncoderParams) -> np.ndarray:
    aug = np.asarray(aug, dtype=np.float64)
    if aug.ndim != 2 or aug.shape[1] != params.in_dim:
        raise ValidationError(f"augmented points must be (N, {params.in_dim}), got {aug.shape}")
    if aug.shape[0] < 1:
        raise ValidationError("cannot encode an empty pillar")
    return aug


def encode_points(aug: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Lift augmented points to (N_v, D): rectifier(normalize(affine(aug)))."""
    aug = _check_points(aug, params)
    z = aug @ params.weight.T + params.bias
    scale = params.norm_gamma / np.sqrt(params.norm_var + params.norm_eps)
    y = (z - params.norm_mean) * scale + params.norm_beta
    return np.maximum(y, 0.0)


def max_pool(encoded: np.ndarray) -> np.ndarray:
    """Channel-wise max over the point axis."""
    encoded = np.asarray(encoded, dtype=np.float64)
    if encoded.ndim != 2 or encoded.shape[0] < 1:
        raise ValidationError("max_pool needs a non-empty (N, D) matrix")
    return encoded.max(axis=0)


def attention_scores(encoded: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Per-channel softmax over points of the score-affine logits; columns sum to 1."""
    logits = encoded @ params.score_weight.T + params.score_bias
    logits = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=0, keepdims=True)


def attention_pool(encoded: np.ndarray, params: EncoderParams) -> tuple[np.ndarray, np.ndarray]:
    """Score-weighted sum over points; returns (feature (D,), scores (N, D))."""
    encoded = np.asarray(encoded, dtype=np.float64)
    if encoded.ndim != 2 or encoded.shape[0] < 1:
        raise ValidationError("attention_pool needs a non-empty (N, D) matrix")
    if encoded.shape[1] != params.dim:
        raise ValidationError(f"encoded width {encoded.shape[1]} != encoder dim {params.dim}")
    s = attention_scores(encoded, params)
    return (s * encoded).sum(axis=0), s


def encode_pillar(aug: np.ndarray, params: EncoderParams, keep_intermediates: bool = True) -> PillarFeature:
    """Full pillar encoding: f = (max-pooled + attention-pooled) / 2."""
    pe = encode_points(aug, params)
    f_max = max_pool(pe)
    f_att, scores = attention_pool(pe, params)
    f = (f_max + f_att) / 2.0
    if keep_intermediates:
        return PillarFeature(f=f, f_max=f_max, f_att=f_att, scores=scores, encoded=pe)
    return PillarFeature(f=f)


@dataclass(frozen=True)
class EncoderGrads:
    weight: np.ndarray
    bias: np.ndarray
    norm_gamma: np.ndarray
    norm_beta: np.ndarray
    score_weight: np.ndarray
    score_bias: np.ndarray
    inputs: np.ndarray


def encoder_backward(aug: np.ndarray, params: EncoderParams, upstream: np.ndarray) -> EncoderGrads:
    """Exact gradients of upstream . f w.r.t. parameters and inputs.

    The max branch routes through the first maximizing point per channel; the
    rectifier uses the y > 0 subgradient.
    """
    aug = _check_points(aug, params)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (params.dim,):
        raise ValidationError(f"upstream gradient must have shape ({params.dim},)")

    z = aug @ params.weight.T + params.bias
    scale = params.norm_gamma / np.sqrt(params.norm_var + params.norm_eps)
    y = (z - params.norm_mean) * scale + params.norm_beta
    pe = np.maximum(y, 0.0)
    s = attention_scores(pe, params)
    f_att = (s * pe).sum(axis=0)

    half = upstream / 2.0
    d_pe = np.zeros_like(pe)
    d_pe[pe.argmax(axis=0), np.arange(params.dim)] += half  # max branch
    d_pe += s * half  # attention branch, direct term
    d_logits = s * (pe - f_att) * half  # softmax-weighted sum term
    d_pe += d_logits @ params.score_weight

    d_score_weight = d_logits.T @ pe
    d_score_bias = d_logits.sum(axis=0)

    d_y = d_pe * (y > 0.0)
    d_gamma = (d_y * (z - params.norm_mean)).sum(axis=0) / np.sqrt(params.norm_var + params.norm_eps)
    d_beta = d_y.sum(axis=0)
    d_z = d_y * scale
    return EncoderGrads(
        weight=d_z.T @ aug,
        bias=d_z.sum(axis=0),
        norm_gamma=d_gamma,
        norm_beta=d_beta,
        score_weight=d_score_weight,
        score_bias=d_score_bias,
        inputs=d_z @ params.weight,
    )
