"""Stage-ratio backbone of reparameterizable units, neck fusion, compute counters.

Architecture: a stride-1 stem unit maps the encoder width to the stage-1
channels; stages 2-4 each open with a stride-2 transition unit; every counted
"block" is a pair of rep units at the stage width. Channels double per stage
while spatial dims halve, which makes the per-block multiply-accumulate cost
identical across stages. The neck fuses the stage-3 and stage-4 maps (the 8x
and 16x levels of the source grid, given the canvas reduction applied before
the stem) back to the 8x level.

count_macs/count_params are analytic and echo every resolution assumption
they were evaluated under.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .nn import (
    ConvParams,
    RepBlockParams,
    conv2d,
    fuse_rep_block,
    passthrough_rep_block,
    random_rep_block,
    relu,
    unit_forward,
    upsample_nearest2,
)

N_STAGES = 4
DEFAULT_CHANNELS = (64, 128, 256, 512)


@dataclass(frozen=True)
class BackboneConfig:
    """Block allocation per stage plus widths and the stage-1 resolution."""

    stage_blocks: tuple[int, int, int, int]
    stage_channels: tuple[int, int, int, int] = DEFAULT_CHANNELS
    in_channels: int = 64
    input_hw: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if len(self.stage_blocks) != N_STAGES or any(b < 0 for b in self.stage_blocks):
            raise ValidationError(f"stage_blocks must be 4 non-negative ints, got {self.stage_blocks}")
        ch = self.stage_channels
        if len(ch) != N_STAGES or ch[0] < 1 or any(ch[i] != 2 * ch[i - 1] for i in range(1, N_STAGES)):
            raise ValidationError(f"stage_channels must double per stage, got {ch}")
        if self.in_channels < 1:
            raise ValidationError("in_channels must be >= 1")
        h, w = self.input_hw
        if h % 8 or w % 8 or h < 8 or w < 8:
            raise ValidationError(f"input_hw must be multiples of 8 for three exact halvings, got {self.input_hw}")
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in ch))
        object.__setattr__(self, "input_hw", (int(h), int(w)))

    def stage_hw(self) -> list[tuple[int, int]]:
        h, w = self.input_hw
        out = [(h, w)]
        for _ in range(N_STAGES - 1):
            h, w = h // 2, w // 2
            out.append((h, w))
        return out


@dataclass(frozen=True)
class RepPair:
    """One counted block: two rep units (or their fused convs) at stage width."""

    a: RepBlockParams | ConvParams
    b: RepBlockParams | ConvParams


@dataclass
class BackboneParams:
    """Stem, per-stage transitions (stages 2-4), and per-stage block pairs."""

    stem: RepBlockParams | ConvParams
    transitions: list
    stages: list = field(default_factory=list)

    @property
    def mode(self) -> str:
        units = self._units()
        if all(isinstance(u, RepBlockParams) for u in units):
            return "train"
        if all(isinstance(u, ConvParams) for u in units):
            return "fused"
        raise ValidationError("backbone mixes train-time and fused units")

    def _units(self):
        units = [self.stem, *self.transitions]
        for blocks in self.stages:
            for pair in blocks:
                units.extend((pair.a, pair.b))
        return units


def build_backbone(cfg: BackboneConfig, rng: np.random.Generator | None = None) -> BackboneParams:
    """Train-mode parameters; random when an rng is given, passthrough otherwise."""
    def unit(c_in, c_out, stride):
        if rng is None:
            return passthrough_rep_block(c_in, c_out, stride)
        return random_rep_block(rng, c_in, c_out, stride)

    ch = cfg.stage_channels
    stem = unit(cfg.in_channels, ch[0], 1)
    transitions = [unit(ch[i - 1], ch[i], 2) for i in range(1, N_STAGES)]
    stages = [
        [RepPair(unit(ch[i], ch[i], 1), unit(ch[i], ch[i], 1)) for _ in range(cfg.stage_blocks[i])]
        for i in range(N_STAGES)
    ]
    return BackboneParams(stem=stem, transitions=transitions, stages=stages)


def fuse_backbone(params: BackboneParams) -> BackboneParams:
    """Fuse every rep unit to its single-conv equivalent."""
    def fuse(u):
        return fuse_rep_block(u) if isinstance(u, RepBlockParams) else u

    return BackboneParams(
        stem=fuse(params.stem),
        transitions=[fuse(t) for t in params.transitions],
        stages=[[RepPair(fuse(p.a), fuse(p.b)) for p in blocks] for blocks in params.stages],
    )


def backbone_forward(x: np.ndarray, params: BackboneParams) -> list[np.ndarray]:
    """Run all four stages; returns the per-stage outputs (the last two are
    the neck taps)."""
    x = unit_forward(x, params.stem)
    outs = []
    for i in range(N_STAGES):
        if i > 0:
            x = unit_forward(x, params.transitions[i - 1])
        for pair in params.stages[i]:
            x = unit_forward(unit_forward(x, pair.a), pair.b)
        outs.append(x)
    return outs


@dataclass(frozen=True)
class NeckParams:
    """1x1 projections for the two levels plus the 3x3 fusion conv."""

    proj8: ConvParams
    proj16: ConvParams
    fuse: ConvParams


def build_neck(c8: int, c16: int, out_channels: int, rng: np.random.Generator | None = None) -> NeckParams:
    def conv(c_in, c_out, k):
        if rng is None:
            kern = np.zeros((c_out, c_in, k, k), dtype=np.float32)
            kern[np.arange(c_out), np.arange(c_out) % c_in, k // 2, k // 2] = 1.0
        else:
            kern = rng.normal(0.0, 1.0, (c_out, c_in, k, k)) / np.sqrt(k * k * c_in)
        bias = np.zeros(c_out) if rng is None else rng.normal(0.0, 0.05, c_out)
        return ConvParams(kern, bias)

    half = out_channels // 2 or out_channels
    return NeckParams(
        proj8=conv(c8, half, 1),
        proj16=conv(c16, half, 1),
        fuse=conv(2 * half, out_channels, 3),
    )


def neck_fuse(f8: np.ndarray, f16: np.ndarray, neck: NeckParams) -> np.ndarray:
    """Upsample the 16x map, project both levels, concat, fuse. Output at 8x."""
    if f16.shape[2] * 2 != f8.shape[2] or f16.shape[3] * 2 != f8.shape[3]:
        raise ValidationError(
            f"16x map {f16.shape[2:]} must be half the 8x map {f8.shape[2:]} spatially"
        )
    a = conv2d(f8, neck.proj8)
    b = conv2d(upsample_nearest2(f16), neck.proj16)
    return relu(conv2d(np.concatenate([a, b], axis=1), neck.fuse))


def block_macs(channels, h, w):
    """Multiply-accumulates of one two-conv block at the given resolution.

    Pure arithmetic: also usable with symbolic operands to show the cost is
    invariant under channel doubling with spatial halving.
    """
    return 2 * 9 * channels * channels * h * w


def block_params(channels):
    """Fused parameter count of one block (two 3x3 convs with bias)."""
    return 2 * (9 * channels * channels + channels)


@dataclass(frozen=True)
class MacReport:
    """Analytic MAC counts; all assumptions are echoed in the fields."""

    stage_blocks: tuple[int, int, int, int]
    stage_channels: tuple[int, int, int, int]
    in_channels: int
    input_hw: tuple[int, int]
    stage_hw: tuple[tuple[int, int], ...]
    per_block: tuple[int, int, int, int]
    stage_totals: tuple[int, int, int, int]
    transition_macs: tuple[int, int, int, int]  # stem first
    total: int

    def as_dict(self) -> dict:
        return {
            "stage_blocks": list(self.stage_blocks),
            "stage_channels": list(self.stage_channels),
            "in_channels": self.in_channels,
            "input_hw": list(self.input_hw),
            "stage_hw": [list(hw) for hw in self.stage_hw],
            "per_block_macs": list(self.per_block),
            "stage_block_macs": list(self.stage_totals),
            "transition_macs": list(self.transition_macs),
            "total_macs": self.total,
        }


def count_macs(cfg: BackboneConfig) -> MacReport:
    """Exact integer MACs of all convs (stem, transitions, blocks)."""
    hw = cfg.stage_hw()
    ch = cfg.stage_channels
    per_block = tuple(block_macs(ch[i], *hw[i]) for i in range(N_STAGES))
    stage_totals = tuple(cfg.stage_blocks[i] * per_block[i] for i in range(N_STAGES))
    transitions = [9 * cfg.in_channels * ch[0] * hw[0][0] * hw[0][1]]
    for i in range(1, N_STAGES):
        transitions.append(9 * ch[i - 1] * ch[i] * hw[i][0] * hw[i][1])
    total = sum(stage_totals) + sum(transitions)
    return MacReport(
        stage_blocks=cfg.stage_blocks,
        stage_channels=ch,
        in_channels=cfg.in_channels,
        input_hw=cfg.input_hw,
        stage_hw=tuple(hw),
        per_block=per_block,
        stage_totals=stage_totals,
        transition_macs=tuple(transitions),
        total=total,
    )


@dataclass(frozen=True)
class ParamReport:
    stage_blocks: tuple[int, int, int, int]
    stage_channels: tuple[int, int, int, int]
    in_channels: int
    per_block: tuple[int, int, int, int]
    transition_params: tuple[int, int, int, int]  # stem first
    total: int

    def as_dict(self) -> dict:
        return {
            "stage_blocks": list(self.stage_blocks),
            "stage_channels": list(self.stage_channels),
            "in_channels": self.in_channels,
            "per_block_params": list(self.per_block),
            "transition_params": list(self.transition_params),
            "total_params": self.total,
        }


def count_params(cfg: BackboneConfig) -> ParamReport:
    """Fused (inference-mode) parameter count of the backbone."""
    ch = cfg.stage_channels
    per_block = tuple(block_params(ch[i]) for i in range(N_STAGES))
    transitions = [9 * cfg.in_channels * ch[0] + ch[0]]
    for i in range(1, N_STAGES):
        transitions.append(9 * ch[i - 1] * ch[i] + ch[i])
    total = sum(cfg.stage_blocks[i] * per_block[i] for i in range(N_STAGES)) + sum(transitions)
    return ParamReport(
        stage_blocks=cfg.stage_blocks,
        stage_channels=ch,
        in_channels=cfg.in_channels,
        per_block=per_block,
        transition_params=tuple(transitions),
        total=total,
    )
