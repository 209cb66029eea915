"""Convolutional building blocks with exact shape algebra.

Plain, depthwise, pointwise and transposed convolutions, plus the
composite MBConv (inverted residual) and separable-depthwise blocks.
Forwards are vectorized with strided windows + einsum; every adjoint is
written out explicitly and recorded on the autograd tape, so the blocks
compose freely with the rest of the engine.

Shape rules (NCHW):
  plain/depthwise  same padding k//2, output = ceil(H/s)
  pointwise        output = ceil(H/s)
  transposed       kernel even, stride 2, padding (k-2)/2, output = 2H
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import ShapeError, Tensor, _accumulate, _result, channel_norm, relu6, add

__all__ = [
    "ConvSpec",
    "MBConvSpec",
    "SepDepthSpec",
    "Module",
    "Conv",
    "ChannelNorm",
    "ConvNormAct",
    "Identity",
    "MBConv",
    "SepDepth",
    "build_mbconv",
    "build_sepdepth",
    "mbconv_param_count",
    "conv_forward",
    "conv_weight_shape",
    "conv_out_shape",
    "init_conv_weight",
    "transposed_overlap_pattern",
    "overlap_interior",
]

CONV_KINDS = ("plain", "depthwise", "pointwise", "transposed", "transposed_depthwise")
MBCONV_KERNELS = (3, 5, 7)
MBCONV_EXPANSIONS = (3, 6)


@dataclass(frozen=True)
class ConvSpec:
    """One convolution: kind, kernel, stride and channel counts.

    No bias anywhere; the normalization affine provides the shift.
    """

    kind: str
    kernel: int
    stride: int
    in_ch: int
    out_ch: int

    def __post_init__(self):
        if self.kind not in CONV_KINDS:
            raise ValueError(f"unknown conv kind {self.kind!r}; known: {CONV_KINDS}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.in_ch < 1 or self.out_ch < 1:
            raise ValueError("channel counts must be positive")
        if self.kind in ("plain", "depthwise") and self.kernel % 2 == 0:
            raise ValueError(f"{self.kind} convolution needs an odd kernel, got {self.kernel}")
        if self.kind in ("depthwise", "transposed_depthwise") and self.in_ch != self.out_ch:
            raise ValueError(
                f"{self.kind} convolution requires in_ch == out_ch, got {self.in_ch} != {self.out_ch}"
            )
        if self.kind == "pointwise" and self.kernel != 1:
            raise ValueError(f"pointwise convolution requires kernel 1, got {self.kernel}")
        if self.kind in ("transposed", "transposed_depthwise"):
            if self.stride != 2:
                raise ValueError(f"transposed convolution supports stride 2 only, got {self.stride}")
            if self.kernel < 2:
                raise ValueError(
                    f"transposed convolution needs kernel >= 2 for exact 2x upsampling, got {self.kernel}"
                )

    @property
    def padding(self) -> int:
        if self.kind in ("plain", "depthwise"):
            return self.kernel // 2
        if self.kind in ("transposed", "transposed_depthwise"):
            return (self.kernel - 1) // 2
        return 0

    @property
    def output_padding(self) -> int:
        # chosen so (H-1)*2 - 2p + k + op == 2H for every kernel size
        if self.kind in ("transposed", "transposed_depthwise"):
            return 2 * self.padding + 2 - self.kernel
        return 0


@dataclass(frozen=True)
class MBConvSpec:
    """Inverted residual block: expand 1x1 -> depthwise kxk -> project 1x1."""

    kernel: int
    expansion: int
    stride: int
    in_ch: int
    out_ch: int

    def __post_init__(self):
        if self.kernel not in MBCONV_KERNELS:
            raise ValueError(f"MBConv kernel must be one of {MBCONV_KERNELS}, got {self.kernel}")
        if self.expansion not in MBCONV_EXPANSIONS:
            raise ValueError(
                f"MBConv expansion must be one of {MBCONV_EXPANSIONS}, got {self.expansion}"
            )
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")

    @property
    def expanded(self) -> int:
        return self.expansion * self.in_ch

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.in_ch == self.out_ch


@dataclass(frozen=True)
class SepDepthSpec:
    """Separable depthwise convolution: depthwise kxk -> pointwise 1x1."""

    kernel: int
    stride: int
    in_ch: int
    out_ch: int

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError(f"separable depthwise needs an odd kernel, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")


def conv_weight_shape(spec: ConvSpec) -> tuple:
    if spec.kind == "plain":
        return (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)
    if spec.kind == "depthwise":
        return (spec.in_ch, spec.kernel, spec.kernel)
    if spec.kind == "pointwise":
        return (spec.out_ch, spec.in_ch)
    if spec.kind == "transposed":
        return (spec.in_ch, spec.out_ch, spec.kernel, spec.kernel)
    return (spec.in_ch, spec.kernel, spec.kernel)  # transposed_depthwise


def conv_out_shape(spec: ConvSpec, in_shape: tuple) -> tuple:
    """Dry-run shape inference for (C, H, W) input shapes."""
    c, h, w = in_shape
    if c != spec.in_ch:
        raise ShapeError(f"{spec.kind}: input has {c} channels, spec expects {spec.in_ch}")
    if spec.kind in ("transposed", "transposed_depthwise"):
        return (spec.out_ch, 2 * h, 2 * w)
    return (spec.out_ch, -(-h // spec.stride), -(-w // spec.stride))


def init_conv_weight(spec: ConvSpec, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Fan-in scaled uniform init; affine norms elsewhere start at (1, 0)."""
    fan_in = {
        "plain": spec.in_ch * spec.kernel ** 2,
        "depthwise": spec.kernel ** 2,
        "pointwise": spec.in_ch,
        "transposed": spec.in_ch * spec.kernel ** 2,
        "transposed_depthwise": spec.kernel ** 2,
    }[spec.kind]
    bound = float(np.sqrt(1.0 / fan_in))
    w = rng.uniform(-bound, bound, size=conv_weight_shape(spec)).astype(dtype)
    return Tensor(w, requires_grad=True, dtype=dtype)


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(x: np.ndarray, k: int, s: int) -> np.ndarray:
    w = sliding_window_view(x, (k, k), axis=(2, 3))
    if s > 1:
        w = w[:, :, ::s, ::s]
    return w


def _check_input(spec: ConvSpec, weights: Tensor, x: Tensor) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{spec.kind} convolution expects NCHW input, got shape {x.shape}")
    if x.shape[1] != spec.in_ch:
        raise ShapeError(
            f"{spec.kind}: input has {x.shape[1]} channels, spec expects {spec.in_ch}"
        )
    want = conv_weight_shape(spec)
    if weights.shape != want:
        raise ShapeError(f"{spec.kind}: weight shape {weights.shape}, expected {want}")


def conv_forward(spec: ConvSpec, weights: Tensor, x: Tensor) -> Tensor:
    """Run one convolution, differentiable w.r.t. weights and input."""
    _check_input(spec, weights, x)
    if spec.kind == "plain":
        return _plain(weights, x, spec.kernel, spec.stride, spec.padding)
    if spec.kind == "depthwise":
        return _depthwise(weights, x, spec.kernel, spec.stride, spec.padding)
    if spec.kind == "pointwise":
        return _pointwise(weights, x, spec.stride)
    if spec.kind == "transposed":
        return _transposed(weights, x, spec.kernel, spec.stride, spec.padding, spec.output_padding)
    return _transposed_depthwise(
        weights, x, spec.kernel, spec.stride, spec.padding, spec.output_padding
    )


def _plain(w: Tensor, x: Tensor, k: int, s: int, p: int) -> Tensor:
    xp = _pad_hw(x.data, p)
    cols = _windows(xp, k, s)
    out = np.einsum("nchwuv,ocuv->nohw", cols, w.data, optimize=True)
    out = np.ascontiguousarray(out, dtype=x.dtype)
    ho, wo = out.shape[2], out.shape[3]

    def pull(g):
        _accumulate(w, np.einsum("nohw,nchwuv->ocuv", g, cols, optimize=True))
        if x.requires_grad or x._gen is not None:
            dxp = np.zeros_like(xp)
            for u in range(k):
                for v in range(k):
                    dxp[:, :, u : u + s * ho : s, v : v + s * wo : s] += np.einsum(
                        "nohw,oc->nchw", g, w.data[:, :, u, v], optimize=True
                    )
            h, wd = x.shape[2], x.shape[3]
            _accumulate(x, dxp[:, :, p : p + h, p : p + wd])

    return _result(out, (w, x), pull)


def _depthwise(w: Tensor, x: Tensor, k: int, s: int, p: int) -> Tensor:
    xp = _pad_hw(x.data, p)
    cols = _windows(xp, k, s)
    out = np.einsum("nchwuv,cuv->nchw", cols, w.data, optimize=True)
    out = np.ascontiguousarray(out, dtype=x.dtype)
    ho, wo = out.shape[2], out.shape[3]

    def pull(g):
        _accumulate(w, np.einsum("nchw,nchwuv->cuv", g, cols, optimize=True))
        if x.requires_grad or x._gen is not None:
            dxp = np.zeros_like(xp)
            for u in range(k):
                for v in range(k):
                    dxp[:, :, u : u + s * ho : s, v : v + s * wo : s] += (
                        g * w.data[None, :, u, v, None, None]
                    )
            h, wd = x.shape[2], x.shape[3]
            _accumulate(x, dxp[:, :, p : p + h, p : p + wd])

    return _result(out, (w, x), pull)


def _pointwise(w: Tensor, x: Tensor, s: int) -> Tensor:
    xs = x.data[:, :, ::s, ::s] if s > 1 else x.data
    out = np.einsum("oc,nchw->nohw", w.data, xs, optimize=True)
    out = np.ascontiguousarray(out, dtype=x.dtype)

    def pull(g):
        _accumulate(w, np.einsum("nohw,nchw->oc", g, xs, optimize=True))
        if x.requires_grad or x._gen is not None:
            dxs = np.einsum("nohw,oc->nchw", g, w.data, optimize=True)
            if s > 1:
                dx = np.zeros_like(x.data)
                dx[:, :, ::s, ::s] = dxs
            else:
                dx = dxs
            _accumulate(x, dx)

    return _result(out, (w, x), pull)


def _embed_grad(g: np.ndarray, canvas_h: int, canvas_w: int, p: int) -> np.ndarray:
    """Place the output adjoint back onto the full scatter canvas."""
    gp = np.zeros((g.shape[0], g.shape[1], canvas_h, canvas_w), dtype=g.dtype)
    gp[:, :, p : p + g.shape[2], p : p + g.shape[3]] = g
    return gp


def _transposed(w: Tensor, x: Tensor, k: int, s: int, p: int, op: int) -> Tensor:
    n, c, h, wd = x.data.shape
    cout = w.shape[1]
    full_h, full_w = (h - 1) * s + k, (wd - 1) * s + k
    out_pad = np.zeros((n, cout, full_h, full_w), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            out_pad[:, :, u : u + s * h : s, v : v + s * wd : s] += np.einsum(
                "nchw,co->nohw", x.data, w.data[:, :, u, v], optimize=True
            )
    ho, wo = full_h - 2 * p + op, full_w - 2 * p + op
    out = np.ascontiguousarray(out_pad[:, :, p : p + ho, p : p + wo])

    def pull(g):
        gw = _windows(_embed_grad(g, full_h, full_w, p), k, s)
        _accumulate(w, np.einsum("nchw,nohwuv->couv", x.data, gw, optimize=True))
        if x.requires_grad or x._gen is not None:
            _accumulate(x, np.einsum("nohwuv,couv->nchw", gw, w.data, optimize=True))

    return _result(out, (w, x), pull)


def _transposed_depthwise(w: Tensor, x: Tensor, k: int, s: int, p: int, op: int) -> Tensor:
    n, c, h, wd = x.data.shape
    full_h, full_w = (h - 1) * s + k, (wd - 1) * s + k
    out_pad = np.zeros((n, c, full_h, full_w), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            out_pad[:, :, u : u + s * h : s, v : v + s * wd : s] += (
                x.data * w.data[None, :, u, v, None, None]
            )
    ho, wo = full_h - 2 * p + op, full_w - 2 * p + op
    out = np.ascontiguousarray(out_pad[:, :, p : p + ho, p : p + wo])

    def pull(g):
        gw = _windows(_embed_grad(g, full_h, full_w, p), k, s)
        _accumulate(w, np.einsum("nchw,nchwuv->cuv", x.data, gw, optimize=True))
        if x.requires_grad or x._gen is not None:
            _accumulate(x, np.einsum("nchwuv,cuv->nchw", gw, w.data, optimize=True))

    return _result(out, (w, x), pull)


def transposed_overlap_pattern(k: int, s: int, extent: int) -> np.ndarray:
    """Per-pixel tap coverage of a 2-D transposed conv on a constant input.

    Brute-force scatter of an all-ones kernel from an extent x extent
    input (no padding). The interior is constant iff s divides k.
    """
    if not (k >= s >= 1):
        raise ValueError(f"requires k >= s >= 1, got k={k}, s={s}")
    if extent < 1:
        raise ValueError("extent must be >= 1")
    size = (extent - 1) * s + k
    counts = np.zeros((size, size), dtype=np.int64)
    for i in range(extent):
        for j in range(extent):
            counts[i * s : i * s + k, j * s : j * s + k] += 1
    return counts


def overlap_interior(counts: np.ndarray, k: int) -> np.ndarray:
    """Trim the (k-1)-wide boundary ramp from a coverage map."""
    m = k - 1
    if counts.shape[0] <= 2 * m or counts.shape[1] <= 2 * m:
        raise ValueError("coverage map too small to have an interior")
    return counts[m : counts.shape[0] - m, m : counts.shape[1] - m]


class Module:
    """Minimal composite of parameter tensors and child modules.

    Children and parameters are discovered from instance attributes in
    insertion order (lists/tuples of modules included), which keeps
    parameter ordering deterministic. numpy array attributes are treated
    as non-trainable buffers (running statistics).
    """

    def children(self):
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, (list, tuple)):
                for i, m in enumerate(v):
                    if isinstance(m, Module):
                        yield f"{name}.{i}", m

    def named_params(self, prefix: str = ""):
        for name, v in vars(self).items():
            if isinstance(v, Tensor) and v.requires_grad:
                yield prefix + name, v
        for cname, child in self.children():
            yield from child.named_params(prefix + cname + ".")

    def named_buffers(self, prefix: str = ""):
        for name, v in vars(self).items():
            if isinstance(v, np.ndarray):
                yield prefix + name, v
        for cname, child in self.children():
            yield from child.named_buffers(prefix + cname + ".")

    def params(self):
        return [t for _, t in self.named_params()]

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params())

    def __call__(self, x, training: bool = False, **kwargs):
        return self.forward(x, training, **kwargs)

    def forward(self, x, training: bool = False):  # pragma: no cover - abstract
        raise NotImplementedError


class Identity(Module):
    def forward(self, x, training: bool = False):
        return x


class Conv(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.weight = init_conv_weight(spec, rng, dtype)

    def forward(self, x, training: bool = False):
        return conv_forward(self.spec, self.weight, x)


class ChannelNorm(Module):
    """Stateful channelwise affine normalization (EMA momentum 0.1)."""

    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, training: bool = False):
        return channel_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training, self.momentum, self.eps,
        )


class ConvNormAct(Module):
    """Convolution -> channel norm -> optional ReLU6."""

    def __init__(self, spec: ConvSpec, rng, dtype=np.float32, act: bool = True):
        self.conv = Conv(spec, rng, dtype)
        self.norm = ChannelNorm(spec.out_ch, dtype)
        self.act = act

    def forward(self, x, training: bool = False):
        out = self.norm(self.conv(x), training)
        return relu6(out) if self.act else out


class MBConv(Module):
    """expand 1x1 -> dw kxk (stride) -> project 1x1, residual when shapes allow."""

    def __init__(self, spec: MBConvSpec, rng, dtype=np.float32):
        e = spec.expanded
        self.spec = spec
        self.expand = ConvNormAct(ConvSpec("pointwise", 1, 1, spec.in_ch, e), rng, dtype)
        self.depthwise = ConvNormAct(
            ConvSpec("depthwise", spec.kernel, spec.stride, e, e), rng, dtype
        )
        self.project = ConvNormAct(
            ConvSpec("pointwise", 1, 1, e, spec.out_ch), rng, dtype, act=False
        )

    def forward(self, x, training: bool = False):
        out = self.project(self.depthwise(self.expand(x, training), training), training)
        if self.spec.residual:
            out = add(out, x)
        return out


class SepDepth(Module):
    """depthwise kxk (stride) -> norm/ReLU6 -> pointwise -> norm."""

    def __init__(self, spec: SepDepthSpec, rng, dtype=np.float32):
        self.spec = spec
        self.depthwise = ConvNormAct(
            ConvSpec("depthwise", spec.kernel, spec.stride, spec.in_ch, spec.in_ch), rng, dtype
        )
        self.pointwise = ConvNormAct(
            ConvSpec("pointwise", 1, 1, spec.in_ch, spec.out_ch), rng, dtype, act=False
        )

    def forward(self, x, training: bool = False):
        return self.pointwise(self.depthwise(x, training), training)


def build_mbconv(spec: MBConvSpec, rng=None, dtype=np.float32) -> MBConv:
    if rng is None:
        rng = np.random.default_rng(0)
    return MBConv(spec, rng, dtype)


def build_sepdepth(
    kernel: int, in_ch: int, out_ch: int, stride: int = 1, rng=None, dtype=np.float32
) -> SepDepth:
    if rng is None:
        rng = np.random.default_rng(0)
    return SepDepth(SepDepthSpec(kernel, stride, in_ch, out_ch), rng, dtype)


def mbconv_param_count(spec: MBConvSpec) -> int:
    """Closed-form parameter count: three convolutions + norm affines."""
    e = spec.expanded
    conv = spec.in_ch * e + e * spec.kernel ** 2 + e * spec.out_ch
    affine = 2 * (e + e + spec.out_ch)
    return conv + affine
