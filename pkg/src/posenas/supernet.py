"""Relaxed search space: mixed layers, architecture parameters, drop-path.

Every searchable layer holds the full candidate set (MBConv kernel x
expansion variants, plus identity skip where admissible) and one
architecture parameter per candidate. The layer output is the
probability-weighted sum of all candidate outputs, so gradients reach
both the operation weights and the architecture parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ShapeError, Tensor, softmax, weighted_sum
from .nn import (
    ConvNormAct,
    ConvSpec,
    Identity,
    MBConv,
    MBConvSpec,
    Module,
    SepDepth,
    SepDepthSpec,
)

__all__ = [
    "StageSpec",
    "SupernetConfig",
    "MixedLayer",
    "Supernet",
    "layer_probs",
    "mixed_forward",
    "drop_path",
    "build_supernet",
    "table1_small_config",
    "desk_config",
    "op_id",
    "layer_plan",
    "candidate_ids_for",
]

SKIP = "skip"


def op_id(spec) -> str:
    """Canonical candidate identifier used in cost tables and arch files."""
    if spec == SKIP or isinstance(spec, str):
        if spec != SKIP:
            raise ValueError(f"unknown op token {spec!r}")
        return SKIP
    if isinstance(spec, MBConvSpec):
        return f"mbconv-k{spec.kernel}-e{spec.expansion}"
    raise TypeError(f"cannot name candidate of type {type(spec).__name__}")


@dataclass(frozen=True)
class StageSpec:
    width: int
    first_stride: int
    depth: int

    def __post_init__(self):
        if self.width < 1 or self.depth < 1:
            raise ValueError("stage width and depth must be positive")
        if self.first_stride not in (1, 2):
            raise ValueError("stage stride must be 1 or 2")


@dataclass(frozen=True)
class SupernetConfig:
    """Backbone layout: stem widths plus per-stage (width, stride, depth)."""

    input_size: int = 64
    in_channels: int = 1
    stem_width: int = 8
    stem_sep_width: int = 4
    stages: tuple = (
        StageSpec(6, 2, 2),
        StageSpec(8, 2, 2),
        StageSpec(16, 2, 2),
        StageSpec(24, 1, 2),
    )
    kernels: tuple = (3, 5, 7)
    expansions: tuple = (3, 6)
    downsamples: int = 4

    def __post_init__(self):
        widths = [s.width for s in self.stages]
        if any(b < a for a, b in zip(widths, widths[1:])):
            raise ValueError(f"stage widths must be non-decreasing, got {widths}")
        n_s2 = 1 + sum(1 for s in self.stages if s.first_stride == 2)  # stem is stride 2
        if n_s2 != self.downsamples:
            raise ValueError(
                f"config declares {self.downsamples} downsamplings but has {n_s2} stride-2 positions"
            )
        if self.input_size % (1 << self.downsamples) != 0:
            raise ValueError(
                f"input size {self.input_size} not divisible by {1 << self.downsamples}"
            )

    @property
    def out_channels(self) -> int:
        return self.stages[-1].width

    def feature_size(self) -> int:
        return self.input_size >> self.downsamples


def table1_small_config(input_size: int = 256, in_channels: int = 3) -> SupernetConfig:
    """The full-scale 'small' backbone layout (stem 32/16; stages 24/32/64/96)."""
    return SupernetConfig(
        input_size=input_size,
        in_channels=in_channels,
        stem_width=32,
        stem_sep_width=16,
        stages=(
            StageSpec(24, 2, 4),
            StageSpec(32, 2, 6),
            StageSpec(64, 2, 10),
            StageSpec(96, 1, 8),
        ),
    )


def desk_config(input_size: int = 64, in_channels: int = 1) -> SupernetConfig:
    """Small-setting layout scaled for CPU minutes: widths / 4, depth capped at 2."""
    return SupernetConfig(input_size=input_size, in_channels=in_channels)


def layer_plan(config: SupernetConfig):
    """Per-layer (index, stage, in_ch, out_ch, stride, input (C, H, W)).

    Single source of truth for the layer layout; the supernet builder,
    cost tables and random sampling all read from it.
    """
    plan = []
    ch = config.stem_sep_width
    size = config.input_size // 2  # after the stride-2 stem conv
    idx = 0
    for stage_i, stage in enumerate(config.stages):
        for d in range(stage.depth):
            stride = stage.first_stride if d == 0 else 1
            plan.append((idx, stage_i, ch, stage.width, stride, (ch, size, size)))
            if stride == 2:
                size //= 2
            ch = stage.width
            idx += 1
    return plan


def candidate_ids_for(config: SupernetConfig, in_ch: int, out_ch: int, stride: int):
    """Candidate op ids at one layer position; skip only where admissible."""
    ids = [f"mbconv-k{k}-e{e}" for k in config.kernels for e in config.expansions]
    if stride == 1 and in_ch == out_ch:
        ids.append(SKIP)
    return ids


def layer_probs(alpha: Tensor) -> Tensor:
    """Candidate probabilities: stabilized softmax of the layer's parameters."""
    if not np.all(np.isfinite(alpha.data)):
        raise ValueError("architecture parameters contain NaN or infinity")
    return softmax(alpha)


def layer_probs_np(alpha: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(alpha)):
        raise ValueError("architecture parameters contain NaN or infinity")
    z = alpha - alpha.max()
    e = np.exp(z)
    return e / e.sum()


class MixedLayer(Module):
    """One searchable layer: candidate modules plus architecture parameters."""

    def __init__(
        self,
        index: int,
        stage: int,
        in_ch: int,
        out_ch: int,
        stride: int,
        kernels,
        expansions,
        rng,
        dtype=np.float32,
    ):
        self.index = index
        self.stage = stage
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.stride = stride
        specs = [
            MBConvSpec(k, e, stride, in_ch, out_ch) for k in kernels for e in expansions
        ]
        self.candidate_specs = list(specs)
        self.candidates = [MBConv(s, rng, dtype) for s in specs]
        if stride == 1 and in_ch == out_ch:
            self.candidate_specs.append(SKIP)
            self.candidates.append(Identity())
        # uniform prior over candidates
        self.alpha = Tensor(
            np.zeros(len(self.candidates), dtype=dtype), requires_grad=True, dtype=dtype
        )

    @property
    def candidate_ids(self):
        return [op_id(s) for s in self.candidate_specs]

    def probs(self) -> Tensor:
        return layer_probs(self.alpha)

    def probs_np(self) -> np.ndarray:
        return layer_probs_np(self.alpha.data)

    def forward(self, x, training: bool = False, mask=None):
        return mixed_forward(x, self, training, mask)


def mixed_forward(x: Tensor, layer: MixedLayer, training: bool = False, mask=None) -> Tensor:
    """Probability-weighted sum of candidate outputs.

    ``mask`` is an optional (active, probs) pair from :func:`drop_path`;
    when given, dropped candidates are not evaluated at all and the
    surviving probabilities enter as constants (weight-update phases).
    """
    if mask is not None:
        active, probs = mask
        idx = [i for i in range(len(layer.candidates)) if active[i]]
        p = Tensor(probs[idx].astype(x.dtype))
        outs = [layer.candidates[i](x, training) for i in idx]
    else:
        p = layer.probs()
        outs = [m(x, training) for m in layer.candidates]
    shapes = {o.shape for o in outs}
    if len(shapes) > 1:
        raise ShapeError(
            f"layer {layer.index}: candidates disagree on output shape: {sorted(shapes)}"
        )
    return weighted_sum(p, outs)


def drop_path(layer: MixedLayer, drop_rate: float, rng: np.random.Generator):
    """Independently drop candidates, keeping at least one survivor.

    Returns (active mask, full-length probabilities renormalized over the
    survivors). drop_rate 0 keeps everything and leaves probabilities
    untouched.
    """
    if not (0.0 <= drop_rate < 1.0):
        raise ValueError(f"drop_rate must be in [0, 1), got {drop_rate}")
    n = len(layer.candidates)
    probs = layer.probs_np()
    if drop_rate == 0.0:
        return np.ones(n, dtype=bool), probs
    active = rng.random(n) >= drop_rate
    while not active.any():
        active = rng.random(n) >= drop_rate
    kept = np.where(active, probs, 0.0)
    total = kept.sum()
    if total <= 0.0:  # all surviving probabilities underflowed; fall back to uniform
        kept = active.astype(probs.dtype)
        total = kept.sum()
    return active, kept / total


class Supernet(Module):
    """Stem plus the ordered mixed layers; outputs trunk features."""

    def __init__(self, config: SupernetConfig, rng, dtype=np.float32):
        self.config = config
        self.stem = ConvNormAct(
            ConvSpec("plain", 3, 2, config.in_channels, config.stem_width), rng, dtype
        )
        self.stem_sep = SepDepth(
            SepDepthSpec(3, 1, config.stem_width, config.stem_sep_width), rng, dtype
        )
        layers = []
        shapes = []
        for idx, stage_i, in_ch, out_ch, stride, shape in layer_plan(config):
            shapes.append(shape)
            layers.append(
                MixedLayer(
                    idx, stage_i, in_ch, out_ch, stride,
                    config.kernels, config.expansions, rng, dtype,
                )
            )
        self.layers = layers
        self._layer_shapes = shapes
        self.out_channels = config.out_channels
        self._out_size = config.feature_size()

    def layer_input_shapes(self):
        """(C, H, W) entering each mixed layer, from dry-run shape inference."""
        return list(self._layer_shapes)

    def head_in_shape(self):
        return (self.out_channels, self._out_size, self._out_size)

    def alphas(self):
        return [layer.alpha for layer in self.layers]

    def forward(self, x, training: bool = False, drop=None):
        out = self.stem_sep(self.stem(x, training), training)
        for layer in self.layers:
            mask = drop.get(layer.index) if drop else None
            out = layer.forward(out, training, mask)
        return out


def build_supernet(config: SupernetConfig, seed: int = 0, dtype=np.float32) -> Supernet:
    rng = np.random.default_rng(seed)
    return Supernet(config, rng, dtype)
