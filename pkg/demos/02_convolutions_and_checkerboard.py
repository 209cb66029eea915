#!/usr/bin/env python3
# The convolution zoo, exact shape algebra, and why transposed
# convolutions produce checkerboard artifacts when the kernel size is
# not divisible by the stride.

import numpy as np

from posenas.autograd import Tensor, no_grad
from posenas.nn import (
    ConvSpec, MBConv, MBConvSpec, build_sepdepth, conv_forward, conv_out_shape,
    init_conv_weight, overlap_interior, transposed_overlap_pattern,
)
from posenas.pipeline import checkerboard_score

rng = np.random.default_rng(0)

# ---------------------------------------------------------------------------
# Same-padded convolutions keep ceil(H/s) spatial behaviour; transposed
# convolutions upsample exactly 2x for any kernel >= 2 (odd kernels get
# one line of output padding).

for spec in (
    ConvSpec("plain", 3, 2, 3, 8),
    ConvSpec("depthwise", 7, 1, 4, 4),
    ConvSpec("pointwise", 1, 1, 8, 2),
    ConvSpec("transposed", 4, 2, 8, 4),
    ConvSpec("transposed", 3, 2, 8, 4),
):
    x = Tensor(rng.standard_normal((1, spec.in_ch, 16, 16)).astype(np.float32))
    with no_grad():
        y = conv_forward(spec, init_conv_weight(spec, rng), x)
    print(f"{spec.kind:>20} k{spec.kernel} s{spec.stride}: {x.shape} -> {y.shape}",
          "| dry-run:", conv_out_shape(spec, (spec.in_ch, 16, 16)))

# ---------------------------------------------------------------------------
# Mobile blocks: inverted residual (MBConv) and separable depthwise.

block = MBConv(MBConvSpec(kernel=5, expansion=6, stride=1, in_ch=8, out_ch=8), rng)
x = Tensor(rng.standard_normal((2, 8, 16, 16)).astype(np.float32))
with no_grad():
    print("MBConv k5 e6:", x.shape, "->", block(x, training=True).shape,
          f"({block.param_count()} parameters, residual={block.spec.residual})")

sep = build_sepdepth(3, 32, 16, rng=rng)
print("SepDepth3x3 32->16 conv weights:",
      sum(t.data.size for n, t in sep.named_params() if n.endswith("conv.weight")))

# ---------------------------------------------------------------------------
# Transposed-conv overlap analysis. For a constant input and an all-ones
# kernel, each output pixel counts how many kernel taps land on it. The
# interior is uniform iff stride divides kernel; otherwise the coverage
# tiles with period s and the result is the classic checkerboard.

for k in (2, 3, 4):
    counts = transposed_overlap_pattern(k, 2, extent=8)
    interior = overlap_interior(counts, k)
    print(f"k={k} s=2 interior coverage:\n{interior[:4, :4]}")

# The artifact score turns that pattern into a single number in [0, 1]:
# variance of the four stride-2 phase means over the total variance.
const = np.ones((1, 1, 16, 16))
for k, p in ((3, 0), (4, 1)):
    w = np.ones((1, 1, k, k), dtype=np.float64)
    full = np.zeros((1, 1, (15) * 2 + k, (15) * 2 + k))
    # brute-force scatter
    for i in range(16):
        for j in range(16):
            full[0, 0, i * 2 : i * 2 + k, j * 2 : j * 2 + k] += 1.0
    m = full[0, 0]
    m = m[: m.shape[0] - m.shape[0] % 2, : m.shape[1] - m.shape[1] % 2]
    print(f"k={k}: checkerboard score of constant-input deconv = {checkerboard_score(m):.3f}")
