"""Discrete architectures: derivation from trained parameters, the
efficient decoder head, full-network assembly and canonical text files.

Skip choices are recorded in the descriptor but collapse at build time;
that is how depth is searched. The head upsamples 4x with two stride-2
transposed convolutions, optionally corrects the result with a 3x3
depthwise convolution (spatial information correction) and maps to one
heatmap per keypoint with a linear 1x1 convolution.

Head styles replace each plain transposed convolution with a lighter
upsampling block built around a *depthwise* transposed convolution:
  sep   depthwise-transposed k4 s2 -> norm/ReLU6 -> pointwise -> norm/ReLU6
  ir    pointwise expand x6 -> norm/ReLU6 -> depthwise-transposed k4 s2
        -> norm/ReLU6 -> pointwise project -> norm
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cost import flops_of
from .fileio import FormatError
from .nn import (
    Conv,
    ConvNormAct,
    ConvSpec,
    MBConv,
    MBConvSpec,
    Module,
    SepDepth,
    SepDepthSpec,
)
from .supernet import SKIP, Supernet, op_id

__all__ = [
    "HeadConfig",
    "LayerChoice",
    "StemSpec",
    "ArchitectureDescriptor",
    "Head",
    "PoseNet",
    "derive_architecture",
    "build_head",
    "assemble_network",
    "serialize",
    "parse",
    "save_arch",
    "load_arch",
    "head_flops",
    "network_flops",
    "save_search_state",
    "load_search_state",
    "derive_from_state",
]

HEAD_STYLES = ("plain", "sep", "ir")
DECONV_KERNEL = 4  # stride-2 transposed convolutions; config knob
IR_EXPANSION = 6


@dataclass(frozen=True)
class HeadConfig:
    w1: int = 64
    w2: int = 32
    sic: bool = True
    style: str = "plain"
    keypoints: int = 16
    deconv_kernel: int = DECONV_KERNEL

    def __post_init__(self):
        if self.w1 < 1 or self.w2 < 1:
            raise ValueError("transposed-conv widths must be positive")
        if self.style not in HEAD_STYLES:
            raise ValueError(f"unknown head style {self.style!r}; known: {HEAD_STYLES}")
        if self.keypoints < 1:
            raise ValueError("keypoint count must be >= 1")


@dataclass(frozen=True)
class StemSpec:
    conv_width: int
    sep_width: int


@dataclass(frozen=True)
class LayerChoice:
    index: int
    stage: int
    op: str  # "skip" or "mbconv"
    kernel: int = 0
    expansion: int = 0
    width: int = 0
    stride: int = 1

    @classmethod
    def mbconv(cls, index, stage, kernel, expansion, width, stride):
        return cls(index, stage, "mbconv", kernel, expansion, width, stride)

    @classmethod
    def skip(cls, index, stage):
        return cls(index, stage, "skip")


@dataclass(frozen=True)
class ArchitectureDescriptor:
    input_h: int
    input_w: int
    input_ch: int
    stem: StemSpec
    layers: tuple
    head: HeadConfig
    version: int = 1


def derive_architecture(supernet: Supernet, head: HeadConfig = None, table=None) -> ArchitectureDescriptor:
    """Per-layer argmax of the candidate probabilities.

    Exact ties break toward the cheaper candidate (from ``table`` when
    given, analytic FLOPs otherwise), then toward the lowest index.
    """
    shapes = supernet.layer_input_shapes()
    choices = []
    for layer, shape in zip(supernet.layers, shapes):
        probs = layer.probs_np()
        if table is not None:
            costs = [table.cost(layer.index, o) for o in layer.candidate_ids]
        else:
            costs = [flops_of(s, shape) for s in layer.candidate_specs]
        order = sorted(range(len(probs)), key=lambda i: (-probs[i], costs[i], i))
        best = layer.candidate_specs[order[0]]
        if best == SKIP:
            choices.append(LayerChoice.skip(layer.index, layer.stage))
        else:
            choices.append(
                LayerChoice.mbconv(
                    layer.index, layer.stage, best.kernel, best.expansion,
                    best.out_ch, best.stride,
                )
            )
    cfg = supernet.config
    if head is None:
        head = HeadConfig()
    return ArchitectureDescriptor(
        input_h=cfg.input_size,
        input_w=cfg.input_size,
        input_ch=cfg.in_channels,
        stem=StemSpec(cfg.stem_width, cfg.stem_sep_width),
        layers=tuple(choices),
        head=head,
    )


def _upsample_plan(style: str, in_ch: int, out_ch: int, k: int):
    """Spec sequence for one 2x upsampling block: (ConvSpec, relu6 after norm)."""
    if style == "plain":
        return [(ConvSpec("transposed", k, 2, in_ch, out_ch), True)]
    if style == "sep":
        return [
            (ConvSpec("transposed_depthwise", k, 2, in_ch, in_ch), True),
            (ConvSpec("pointwise", 1, 1, in_ch, out_ch), True),
        ]
    e = IR_EXPANSION * in_ch
    return [
        (ConvSpec("pointwise", 1, 1, in_ch, e), True),
        (ConvSpec("transposed_depthwise", k, 2, e, e), True),
        (ConvSpec("pointwise", 1, 1, e, out_ch), False),
    ]


def _head_plan(in_ch: int, cfg: HeadConfig):
    """Full head as ((ConvSpec, act, normed) ...); final 1x1 is linear, no norm."""
    plan = []
    for spec, act in _upsample_plan(cfg.style, in_ch, cfg.w1, cfg.deconv_kernel):
        plan.append((spec, act, True))
    for spec, act in _upsample_plan(cfg.style, cfg.w1, cfg.w2, cfg.deconv_kernel):
        plan.append((spec, act, True))
    if cfg.sic:
        plan.append((ConvSpec("depthwise", 3, 1, cfg.w2, cfg.w2), False, True))
    plan.append((ConvSpec("pointwise", 1, 1, cfg.w2, cfg.keypoints), False, False))
    return plan


class Head(Module):
    """Slim upsampling head producing K heatmaps at 4x the trunk resolution."""

    def __init__(self, in_ch: int, cfg: HeadConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.in_ch = in_ch
        stages = []
        for spec, act, normed in _head_plan(in_ch, cfg):
            stages.append(ConvNormAct(spec, rng, dtype, act=act) if normed else Conv(spec, rng, dtype))
        self.stages = stages
        # index of the feature map entering SIC (== post-deconv features)
        self._sic_pos = len(stages) - 2 if cfg.sic else None

    def forward(self, x, training: bool = False):
        for stage in self.stages:
            x = stage(x, training)
        return x

    def forward_taps(self, x, training: bool = False):
        """Forward returning (heatmaps, taps) for artifact measurements.

        taps["post_deconv"] is the feature map after the last upsampling
        block; taps["post_sic"] is present when SIC is enabled.
        """
        taps = {}
        deconv_end = len(self.stages) - (2 if self.cfg.sic else 1)
        for i, stage in enumerate(self.stages):
            x = stage(x, training)
            if i == deconv_end - 1:
                taps["post_deconv"] = x
            if self._sic_pos is not None and i == self._sic_pos:
                taps["post_sic"] = x
        return x, taps


def build_head(in_channels: int, cfg: HeadConfig, rng=None, dtype=np.float32) -> Head:
    if rng is None:
        rng = np.random.default_rng(0)
    return Head(in_channels, cfg, rng, dtype)


class PoseNet(Module):
    """stem -> surviving searched layers -> head."""

    def __init__(self, desc: ArchitectureDescriptor, rng, dtype=np.float32):
        self.descriptor = desc
        self.stem = ConvNormAct(
            ConvSpec("plain", 3, 2, desc.input_ch, desc.stem.conv_width), rng, dtype
        )
        self.stem_sep = SepDepth(
            SepDepthSpec(3, 1, desc.stem.conv_width, desc.stem.sep_width), rng, dtype
        )
        blocks = []
        ch = desc.stem.sep_width
        for layer in desc.layers:
            if layer.op == "skip":
                continue
            spec = MBConvSpec(layer.kernel, layer.expansion, layer.stride, ch, layer.width)
            blocks.append(MBConv(spec, rng, dtype))
            ch = layer.width
        self.blocks = blocks
        self.head = Head(ch, desc.head, rng, dtype)

    def trunk(self, x, training: bool = False):
        out = self.stem_sep(self.stem(x, training), training)
        for block in self.blocks:
            out = block(out, training)
        return out

    def forward(self, x, training: bool = False):
        return self.head(self.trunk(x, training), training)

    def forward_taps(self, x, training: bool = False):
        return self.head.forward_taps(self.trunk(x, training), training)


def assemble_network(desc: ArchitectureDescriptor, seed: int = 0, dtype=np.float32) -> PoseNet:
    _validate_descriptor(desc)
    return PoseNet(desc, np.random.default_rng(seed), dtype)


def _validate_descriptor(desc: ArchitectureDescriptor) -> None:
    if desc.version != 1:
        raise ValueError(f"unsupported descriptor version {desc.version}")
    seen = [l.index for l in desc.layers]
    if seen != list(range(len(seen))):
        raise ValueError(f"layer indices must be contiguous from 0, got {seen}")
    for layer in desc.layers:
        if layer.op not in ("mbconv", "skip"):
            raise ValueError(f"layer {layer.index}: unknown op {layer.op!r}")


def head_flops(in_shape, cfg: HeadConfig) -> int:
    """MACs of the whole head on a (C, H, W) trunk feature map."""
    total = 0
    shape = tuple(in_shape)
    for spec, _act, _normed in _head_plan(in_shape[0], cfg):
        total += flops_of(spec, shape)
        c, h, w = shape
        shape = (spec.out_ch, 2 * h, 2 * w) if spec.kind.startswith("transposed") else (spec.out_ch, h, w)
    return total


def network_flops(desc: ArchitectureDescriptor, breakdown: bool = False):
    """MACs of stem + surviving layers + head; exact sum of the parts."""
    parts = {}
    shape = (desc.input_ch, desc.input_h, desc.input_w)
    stem_conv = ConvSpec("plain", 3, 2, desc.input_ch, desc.stem.conv_width)
    parts["stem"] = flops_of(stem_conv, shape)
    h = desc.input_h // 2
    w = desc.input_w // 2
    parts["stem"] += flops_of(
        SepDepthSpec(3, 1, desc.stem.conv_width, desc.stem.sep_width),
        (desc.stem.conv_width, h, w),
    )
    ch = desc.stem.sep_width
    layer_total = 0
    for layer in desc.layers:
        if layer.op == "skip":
            continue
        spec = MBConvSpec(layer.kernel, layer.expansion, layer.stride, ch, layer.width)
        layer_total += flops_of(spec, (ch, h, w))
        if layer.stride == 2:
            h //= 2
            w //= 2
        ch = layer.width
    parts["layers"] = layer_total
    parts["head"] = head_flops((ch, h, w), desc.head)
    total = sum(parts.values())
    return (total, parts) if breakdown else total


# ---------------------------------------------------------------------------
# canonical architecture text format


def serialize(desc: ArchitectureDescriptor) -> str:
    _validate_descriptor(desc)
    lines = [
        "efficientpose-arch v1",
        f"input {desc.input_h} {desc.input_w} {desc.input_ch}",
        f"stem conv3 {desc.stem.conv_width} s2 ; sepdepth3 {desc.stem.sep_width} s1",
    ]
    for layer in desc.layers:
        if layer.op == "skip":
            lines.append(f"layer {layer.index} stage {layer.stage} skip")
        else:
            lines.append(
                f"layer {layer.index} stage {layer.stage} mbconv "
                f"k{layer.kernel} e{layer.expansion} w{layer.width} s{layer.stride}"
            )
    head = desc.head
    lines.append(
        f"head tconv {head.w1} tconv {head.w2} sic {int(head.sic)} "
        f"style {head.style} k {head.keypoints}"
    )
    return "\n".join(lines) + "\n"


def _intfield(token: str, prefix: str, lineno: int, path) -> int:
    if not token.startswith(prefix) or not token[len(prefix):].isdigit():
        raise FormatError(f"expected {prefix}<int>, got {token!r}", path=path, line=lineno)
    return int(token[len(prefix):])


def parse(text: str, path=None) -> ArchitectureDescriptor:
    lines = text.splitlines()
    content = [
        (i + 1, ln.strip()) for i, ln in enumerate(lines)
        if ln.strip() and not ln.strip().startswith("#")
    ]
    if not content:
        raise FormatError("empty architecture file", path=path, line=1)
    lineno, header = content[0]
    if header.split() != ["efficientpose-arch", "v1"]:
        raise FormatError(f"bad header {header!r}", path=path, line=lineno)

    input_hwc = None
    stem = None
    head = None
    layers = []
    for lineno, line in content[1:]:
        parts = line.split()
        kind = parts[0]
        if kind == "input":
            if len(parts) != 4:
                raise FormatError("expected 'input <H> <W> <C>'", path=path, line=lineno)
            try:
                input_hwc = tuple(int(p) for p in parts[1:])
            except ValueError:
                raise FormatError(f"non-integer input size in {line!r}", path=path, line=lineno) from None
        elif kind == "stem":
            want = ["stem", "conv3", None, "s2", ";", "sepdepth3", None, "s1"]
            if len(parts) != len(want) or any(
                w is not None and p != w for p, w in zip(parts, want)
            ):
                raise FormatError(
                    "expected 'stem conv3 <w> s2 ; sepdepth3 <w> s1'", path=path, line=lineno
                )
            try:
                stem = StemSpec(int(parts[2]), int(parts[6]))
            except ValueError:
                raise FormatError(f"non-integer stem width in {line!r}", path=path, line=lineno) from None
        elif kind == "layer":
            if len(parts) < 5 or parts[2] != "stage":
                raise FormatError(
                    "expected 'layer <idx> stage <s> <op...>'", path=path, line=lineno
                )
            try:
                idx, stage = int(parts[1]), int(parts[3])
            except ValueError:
                raise FormatError(f"non-integer layer/stage index in {line!r}", path=path, line=lineno) from None
            op = parts[4]
            if op == "skip":
                if len(parts) != 5:
                    raise FormatError("skip line takes no extra fields", path=path, line=lineno)
                layers.append(LayerChoice.skip(idx, stage))
            elif op == "mbconv":
                if len(parts) != 9:
                    raise FormatError(
                        "expected 'mbconv k<k> e<e> w<w> s<s>'", path=path, line=lineno
                    )
                k = _intfield(parts[5], "k", lineno, path)
                e = _intfield(parts[6], "e", lineno, path)
                w = _intfield(parts[7], "w", lineno, path)
                s = _intfield(parts[8], "s", lineno, path)
                try:
                    MBConvSpec(k, e, s, w, w)  # validates kernel/expansion/stride sets
                except ValueError as exc:
                    raise FormatError(str(exc), path=path, line=lineno) from None
                layers.append(LayerChoice.mbconv(idx, stage, k, e, w, s))
            else:
                raise FormatError(f"unknown op token {op!r}", path=path, line=lineno)
        elif kind == "head":
            want = ["head", "tconv", None, "tconv", None, "sic", None, "style", None, "k", None]
            if len(parts) != len(want) or any(
                w is not None and p != w for p, w in zip(parts, want)
            ):
                raise FormatError(
                    "expected 'head tconv <w1> tconv <w2> sic <0|1> style <plain|sep|ir> k <K>'",
                    path=path,
                    line=lineno,
                )
            if parts[6] not in ("0", "1"):
                raise FormatError(f"sic flag must be 0 or 1, got {parts[6]!r}", path=path, line=lineno)
            try:
                head = HeadConfig(
                    w1=int(parts[2]),
                    w2=int(parts[4]),
                    sic=parts[6] == "1",
                    style=parts[8],
                    keypoints=int(parts[10]),
                )
            except ValueError as exc:
                raise FormatError(str(exc), path=path, line=lineno) from None
        else:
            raise FormatError(f"unknown line kind {kind!r}", path=path, line=lineno)

    last_line = content[-1][0]
    if input_hwc is None:
        raise FormatError("missing 'input' line", path=path, line=last_line)
    if stem is None:
        raise FormatError("missing 'stem' line", path=path, line=last_line)
    if head is None:
        raise FormatError("missing 'head' line", path=path, line=last_line)
    desc = ArchitectureDescriptor(
        input_h=input_hwc[0],
        input_w=input_hwc[1],
        input_ch=input_hwc[2],
        stem=stem,
        layers=tuple(layers),
        head=head,
    )
    try:
        _validate_descriptor(desc)
    except ValueError as exc:
        raise FormatError(str(exc), path=path, line=last_line) from None
    return desc


def save_arch(desc: ArchitectureDescriptor, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize(desc))


def load_arch(path) -> ArchitectureDescriptor:
    with open(path) as fh:
        return parse(fh.read(), path=path)


# ---------------------------------------------------------------------------
# search state: everything `derive` needs, serialized after a search run


def save_search_state(path, supernet: Supernet, head: HeadConfig) -> None:
    cfg = supernet.config
    lines = [
        "epsearch v1",
        f"input {cfg.input_size} {cfg.input_size} {cfg.in_channels}",
        f"stem conv3 {cfg.stem_width} s2 ; sepdepth3 {cfg.stem_sep_width} s1",
        f"head tconv {head.w1} tconv {head.w2} sic {int(head.sic)} "
        f"style {head.style} k {head.keypoints}",
    ]
    for layer in supernet.layers:
        entries = " ".join(
            f"{oid}:{float(a)!r}" for oid, a in zip(layer.candidate_ids, layer.alpha.data)
        )
        lines.append(
            f"layer {layer.index} stage {layer.stage} w{layer.out_ch} s{layer.stride} {entries}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_search_state(path):
    """Returns (input_hwc, stem, head, layers) with per-candidate alphas."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "epsearch v1":
        raise FormatError("bad search-state header", path=path, line=1)
    input_hwc = None
    stem = None
    head = None
    layers = []
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "input":
            input_hwc = tuple(int(p) for p in parts[1:4])
        elif parts[0] == "stem":
            stem = StemSpec(int(parts[2]), int(parts[6]))
        elif parts[0] == "head":
            head = HeadConfig(
                w1=int(parts[2]), w2=int(parts[4]), sic=parts[6] == "1",
                style=parts[8], keypoints=int(parts[10]),
            )
        elif parts[0] == "layer":
            if len(parts) < 7:
                raise FormatError("truncated layer line", path=path, line=lineno)
            idx, stage = int(parts[1]), int(parts[3])
            width = _intfield(parts[4], "w", lineno, path)
            stride = _intfield(parts[5], "s", lineno, path)
            ops, alphas = [], []
            for tok in parts[6:]:
                if ":" not in tok:
                    raise FormatError(f"expected <op>:<alpha>, got {tok!r}", path=path, line=lineno)
                oid, aval = tok.rsplit(":", 1)
                try:
                    alphas.append(float(aval))
                except ValueError:
                    raise FormatError(f"bad alpha value {aval!r}", path=path, line=lineno) from None
                ops.append(oid)
            layers.append((idx, stage, width, stride, ops, np.array(alphas)))
        else:
            raise FormatError(f"unknown line kind {parts[0]!r}", path=path, line=lineno)
    if input_hwc is None or stem is None or head is None or not layers:
        raise FormatError("incomplete search state", path=path, line=len(lines))
    return input_hwc, stem, head, layers


def _op_from_id(oid: str, width: int, stride: int, in_ch: int):
    if oid == SKIP:
        return SKIP
    if oid.startswith("mbconv-k") and "-e" in oid:
        body = oid[len("mbconv-k"):]
        k_str, e_str = body.split("-e", 1)
        return MBConvSpec(int(k_str), int(e_str), stride, in_ch, width)
    raise ValueError(f"unknown op id {oid!r}")


def derive_from_state(path, table=None) -> ArchitectureDescriptor:
    """Argmax derivation straight from a saved search state."""
    input_hwc, stem, head, layers = load_search_state(path)
    choices = []
    ch = stem.sep_width
    shape_h = input_hwc[0] // 2
    for idx, stage, width, stride, ops, alphas in layers:
        z = alphas - alphas.max()
        probs = np.exp(z) / np.exp(z).sum()
        specs = [_op_from_id(o, width, stride, ch) for o in ops]
        if table is not None:
            costs = [table.cost(idx, o) for o in ops]
        else:
            costs = [flops_of(s, (ch, shape_h, shape_h)) for s in specs]
        order = sorted(range(len(probs)), key=lambda i: (-probs[i], costs[i], i))
        best = specs[order[0]]
        if best == SKIP:
            choices.append(LayerChoice.skip(idx, stage))
        else:
            choices.append(LayerChoice.mbconv(idx, stage, best.kernel, best.expansion, width, stride))
        if stride == 2:
            shape_h //= 2
        ch = width
    return ArchitectureDescriptor(
        input_h=input_hwc[0], input_w=input_hwc[1], input_ch=input_hwc[2],
        stem=stem, layers=tuple(choices), head=head,
    )
