"""Independent oracles and shared fixtures for the test suite.

The convolution oracles here are deliberately naive (nested Python
loops) and never share code with the library implementation; they
define correctness for the vectorized kernels.
"""

import numpy as np

from posenas.autograd import Tensor
from posenas.cost import CostTable, flops_of
from posenas.nn import MBConv, MBConvSpec, Module
from posenas.supernet import MixedLayer, op_id


def naive_conv2d(x, w, stride=1, padding=0):
    """Seven-nested-loop cross-correlation, NCHW x (O, C, kh, kw)."""
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    assert c == c2
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
        xp[:, :, padding : padding + h, padding : padding + wd] = x
    else:
        xp = x
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ic, i * stride + u, j * stride + v] * w[oc, ic, u, v]
                    out[b, oc, i, j] = acc
    return out


def naive_depthwise2d(x, w, stride=1, padding=0):
    """Loop depthwise conv, weights (C, kh, kw)."""
    n, c, h, wd = x.shape
    c2, kh, kw = w.shape
    assert c == c2
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
        xp[:, :, padding : padding + h, padding : padding + wd] = x
    else:
        xp = x
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    out = np.zeros((n, c, ho, wo), dtype=np.float64)
    for b in range(n):
        for ic in range(c):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[b, ic, i * stride + u, j * stride + v] * w[ic, u, v]
                    out[b, ic, i, j] = acc
    return out


def naive_transposed2d(x, w, stride=2, padding=1):
    """Loop transposed conv, weights (Cin, Cout, kh, kw): scatter-add."""
    n, c, h, wd = x.shape
    c2, o, kh, kw = w.shape
    assert c == c2
    full_h = (h - 1) * stride + kh
    full_w = (wd - 1) * stride + kw
    out = np.zeros((n, o, full_h, full_w), dtype=np.float64)
    for b in range(n):
        for ic in range(c):
            for oc in range(o):
                for i in range(h):
                    for j in range(wd):
                        for u in range(kh):
                            for v in range(kw):
                                out[b, oc, i * stride + u, j * stride + v] += (
                                    x[b, ic, i, j] * w[ic, oc, u, v]
                                )
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def tensor64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)


def box_filter_targets(x, k):
    """Depthwise k x k mean filter with same padding."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=np.float64)
    xp[:, :, p : p + h, p : p + w] = x
    out = np.zeros_like(x, dtype=np.float64)
    for u in range(k):
        for v in range(k):
            out += xp[:, :, u : u + h, v : v + w]
    return (out / (k * k)).astype(np.float32)


def ring_filter_targets(x, k=7, inner=3):
    """Mean over the k x k window minus the central inner x inner block.

    For iid inputs the result is statistically independent of everything
    an inner x inner receptive field can see, so only a k x k candidate
    can fit it.
    """
    outer = box_filter_targets(x, k).astype(np.float64) * (k * k)
    center = box_filter_targets(x, inner).astype(np.float64) * (inner * inner)
    return ((outer - center) / (k * k - inner * inner)).astype(np.float32)


def receptive_field_task(n=96, channels=4, size=16, k=7, seed=0, amplitude=0.3):
    """Task solvable only with a k x k receptive field: y = x + a * ring(x).

    The identity part rides the blocks' residual connections for free;
    the ring part is independent of any 3 x 3 neighbourhood, so only the
    large-kernel candidate can reduce the loss below the ring variance.
    ``amplitude`` sets the MSE scale relative to the cost regularizer.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, channels, size, size)).astype(np.float32)
    y = x + amplitude * ring_filter_targets(x, k)
    return x, y


class ToySupernet(Module):
    """One mixed layer over exactly {MBConv k3-e3, MBConv k7-e6}."""

    def __init__(self, channels=4, seed=0):
        rng = np.random.default_rng(seed)
        layer = MixedLayer(0, 0, channels, channels, 1, (3,), (3,), rng)
        specs = [MBConvSpec(3, 3, 1, channels, channels), MBConvSpec(7, 6, 1, channels, channels)]
        layer.candidate_specs = specs
        layer.candidates = [MBConv(s, rng) for s in specs]
        layer.alpha = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
        self.layers = [layer]

    def alphas(self):
        return [self.layers[0].alpha]

    def forward(self, x, training=False, drop=None):
        mask = drop.get(0) if drop else None
        return self.layers[0].forward(x, training, mask)


class ToyModel(Module):
    """Headless search model: the mixed layer's output is the prediction."""

    def __init__(self, channels=4, seed=0):
        self.supernet = ToySupernet(channels, seed)

    def forward(self, x, training=False, drop=None):
        return self.supernet(x, training, drop=drop)

    def weight_params(self):
        return [t for name, t in self.named_params() if not name.endswith(".alpha")]

    def arch_params(self):
        return self.supernet.alphas()


def toy_cost_table(model, size=16) -> CostTable:
    layer = model.supernet.layers[0]
    channels = layer.in_ch
    table = CostTable(benchmark="flops", unit="mflops")
    for spec in layer.candidate_specs:
        table.entries[(0, op_id(spec))] = flops_of(spec, (channels, size, size)) / 1e6
    return table
