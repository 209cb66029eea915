"""Cost lookup tables and the differentiable expected-cost regularizer.

FLOPs are multiply-accumulate counts (1 MAC = 1 FLOP in every report);
normalization and activations are excluded. Transposed convolutions are
counted at *output* resolution (out_h * out_w * c_in * c_out * k * k),
the convention used by common hook-based counters: each output pixel is
charged the full kernel window regardless of stride-induced sparsity.
Documented here because both conventions appear in the wild and they
differ by s^2 for stride-s deconvolutions.

Latency tables come from timing real forward executions on the current
host; tables serialize to a versioned text format with a bit-exact
round trip.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, no_grad, scalar_mul, tlog, tsum, mul, add
from .fileio import FormatError
from .nn import ConvSpec, MBConvSpec, SepDepthSpec, MBConv, SepDepth, Conv, Identity, conv_out_shape
from .supernet import SKIP, Supernet, layer_probs, op_id

__all__ = [
    "CostTable",
    "RegularizerConfig",
    "flops_of",
    "bench_latency",
    "expected_layer_cost",
    "expected_total_cost",
    "uniform_expected_cost",
    "cost_regularizer",
    "build_flops_table",
    "build_latency_table",
    "stem_flops",
    "save_cost_table",
    "load_cost_table",
]


@dataclass(frozen=True)
class RegularizerConfig:
    """Balance weight and log base for the cost term of the loss."""

    lam: float = 0.1
    tau: float = 2.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.tau <= 1:
            raise ValueError(f"tau must be > 1 in the table's unit, got {self.tau}")


@dataclass
class CostTable:
    """Per-(layer, op) costs under one benchmark, plus a fixed offset.

    Non-searched parts (stem, head) are stored as entries at layer -1
    with op ids "stem"/"head" so reported totals cover the whole network.
    """

    benchmark: str
    unit: str
    entries: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def cost(self, layer: int, op: str) -> float:
        try:
            return self.entries[(layer, op)]
        except KeyError:
            raise KeyError(f"cost table has no entry for layer {layer}, op {op!r}") from None

    def layer_costs(self, layer: int, op_ids) -> np.ndarray:
        return np.array([self.cost(layer, o) for o in op_ids], dtype=np.float64)

    def fixed_cost(self) -> float:
        return sum(v for (l, _), v in self.entries.items() if l == -1)

    def covers(self, supernet: Supernet) -> None:
        for layer in supernet.layers:
            for o in layer.candidate_ids:
                self.cost(layer.index, o)


def flops_of(op, in_shape) -> int:
    """MAC count of one operation on a (C, H, W) input."""
    if op == SKIP or (isinstance(op, str) and op == SKIP):
        return 0
    c, h, w = in_shape
    if isinstance(op, ConvSpec):
        co, ho, wo = conv_out_shape(op, in_shape)
        k2 = op.kernel ** 2
        if op.kind == "plain":
            return ho * wo * co * c * k2
        if op.kind == "depthwise":
            return ho * wo * c * k2
        if op.kind == "pointwise":
            return ho * wo * co * c
        if op.kind == "transposed":
            return ho * wo * co * c * k2
        return ho * wo * c * k2  # transposed_depthwise
    if isinstance(op, MBConvSpec):
        e = op.expanded
        expand = flops_of(ConvSpec("pointwise", 1, 1, op.in_ch, e), in_shape)
        dw_spec = ConvSpec("depthwise", op.kernel, op.stride, e, e)
        dw = flops_of(dw_spec, (e, h, w))
        _, ho, wo = conv_out_shape(dw_spec, (e, h, w))
        proj = flops_of(ConvSpec("pointwise", 1, 1, e, op.out_ch), (e, ho, wo))
        return expand + dw + proj
    if isinstance(op, SepDepthSpec):
        dw_spec = ConvSpec("depthwise", op.kernel, op.stride, op.in_ch, op.in_ch)
        dw = flops_of(dw_spec, in_shape)
        _, ho, wo = conv_out_shape(dw_spec, in_shape)
        pw = flops_of(ConvSpec("pointwise", 1, 1, op.in_ch, op.out_ch), (op.in_ch, ho, wo))
        return dw + pw
    raise TypeError(f"cannot count FLOPs for {type(op).__name__}")


def _build_op(op, rng, dtype=np.float32):
    if op == SKIP:
        return Identity()
    if isinstance(op, MBConvSpec):
        return MBConv(op, rng, dtype)
    if isinstance(op, SepDepthSpec):
        return SepDepth(op, rng, dtype)
    if isinstance(op, ConvSpec):
        return Conv(op, rng, dtype)
    raise TypeError(f"cannot build op from {type(op).__name__}")


def bench_latency(
    op,
    in_shape,
    batch: int = 32,
    reps: int = 30,
    warmup: int = 5,
    seed: int = 0,
) -> float:
    """Median forward latency in microseconds on this host.

    Runs ``warmup`` untimed executions, then ``reps`` timed ones, and
    returns the median. Meant to run on an otherwise idle machine.
    """
    if reps < 3:
        raise ValueError(f"reps must be >= 3, got {reps}")
    rng = np.random.default_rng(seed)
    module = _build_op(op, rng)
    c, h, w = in_shape
    x = Tensor(rng.standard_normal((batch, c, h, w)).astype(np.float32))
    times = []
    with no_grad():
        for _ in range(warmup):
            module(x, training=False)
        for _ in range(reps):
            t0 = time.perf_counter_ns()
            module(x, training=False)
            times.append((time.perf_counter_ns() - t0) / 1000.0)
    return float(np.median(times))


def expected_layer_cost(p: Tensor, layer_costs) -> Tensor:
    """sum_o p_o * cost_o, differentiable through p."""
    costs = np.asarray(layer_costs, dtype=np.float64)
    if costs.ndim != 1 or costs.size != p.data.size:
        raise ValueError(
            f"probability vector has {p.data.size} entries, costs have {costs.size}"
        )
    c = Tensor(costs.astype(p.dtype))
    return tsum(mul(p, c))


def expected_total_cost(supernet: Supernet, table: CostTable) -> Tensor:
    """Expected whole-network cost: searched layers plus the fixed offset."""
    total = None
    for layer in supernet.layers:
        costs = table.layer_costs(layer.index, layer.candidate_ids)
        term = expected_layer_cost(layer_probs(layer.alpha), costs)
        total = term if total is None else add(total, term)
    fixed = Tensor(np.asarray(table.fixed_cost(), dtype=total.dtype if total is not None else np.float32))
    return fixed if total is None else add(total, fixed)


def uniform_expected_cost(supernet: Supernet, table: CostTable) -> float:
    """Expected cost at the uniform-prior architecture (alpha = 0)."""
    total = table.fixed_cost()
    for layer in supernet.layers:
        costs = table.layer_costs(layer.index, layer.candidate_ids)
        total += costs.mean()
    return float(total)


def cost_regularizer(cost, cfg: RegularizerConfig):
    """lambda * log_tau(cost); Tensor in, Tensor out (float in, float out)."""
    scale = cfg.lam / float(np.log(cfg.tau))
    if isinstance(cost, Tensor):
        return scalar_mul(tlog(cost), scale)
    if cost <= 0:
        raise ValueError(f"cost must be > 0, got {cost}")
    return scale * float(np.log(cost))


def build_flops_table(supernet: Supernet, fixed_macs=None) -> CostTable:
    """Analytic MFLOPs table covering every (layer, candidate) pair.

    ``fixed_macs`` maps labels ("stem", "head") to MAC counts of the
    non-searched blocks; they enter as constant entries at layer -1.
    """
    table = CostTable(benchmark="flops", unit="mflops")
    table.meta["input_size"] = str(supernet.config.input_size)
    shapes = supernet.layer_input_shapes()
    for layer, shape in zip(supernet.layers, shapes):
        for spec in layer.candidate_specs:
            table.entries[(layer.index, op_id(spec))] = flops_of(spec, shape) / 1e6
    if fixed_macs is None:
        fixed_macs = {"stem": stem_flops(supernet)}
    for label, macs in fixed_macs.items():
        table.entries[(-1, label)] = macs / 1e6
    return table


def build_latency_table(
    supernet: Supernet,
    batch: int = 32,
    reps: int = 30,
    warmup: int = 5,
    seed: int = 0,
    host: str = "",
) -> CostTable:
    """Measured per-op latency table (microseconds) on the current host."""
    table = CostTable(benchmark="latency", unit="us")
    table.meta.update(
        {
            "host": host or "local",
            "batch": str(batch),
            "reps": str(reps),
            "warmup": str(warmup),
            "input_size": str(supernet.config.input_size),
        }
    )
    shapes = supernet.layer_input_shapes()
    for layer, shape in zip(supernet.layers, shapes):
        for spec in layer.candidate_specs:
            table.entries[(layer.index, op_id(spec))] = bench_latency(
                spec, shape, batch, reps, warmup, seed
            )
    return table


def stem_flops(supernet: Supernet) -> int:
    cfg = supernet.config
    conv = flops_of(
        supernet.stem.conv.spec, (cfg.in_channels, cfg.input_size, cfg.input_size)
    )
    half = cfg.input_size // 2
    sep = flops_of(supernet.stem_sep.spec, (cfg.stem_width, half, half))
    return conv + sep


def save_cost_table(table: CostTable, path) -> None:
    lines = [f"costtable v1 {table.benchmark} {table.unit}"]
    for key in sorted(table.meta):
        lines.append(f"# {key}={table.meta[key]}")
    for (layer, op), value in sorted(table.entries.items()):
        lines.append(f"{layer} {op} {value!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_cost_table(path) -> CostTable:
    with open(path) as fh:
        raw = fh.read().splitlines()
    if not raw:
        raise FormatError("empty cost table file", path=path, line=1)
    head = raw[0].split()
    if len(head) != 4 or head[0] != "costtable":
        raise FormatError(f"bad header {raw[0]!r}", path=path, line=1)
    if head[1] != "v1":
        raise FormatError(f"unsupported cost table version {head[1]!r}", path=path, line=1)
    benchmark, unit = head[2], head[3]
    if benchmark not in ("flops", "latency"):
        raise FormatError(f"unknown benchmark {benchmark!r}", path=path, line=1)
    table = CostTable(benchmark=benchmark, unit=unit)
    for i, line in enumerate(raw[1:], start=2):
        text = line.strip()
        if not text:
            continue
        if text.startswith("#"):
            body = text[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                table.meta[k.strip()] = v.strip()
            continue
        parts = text.split()
        if len(parts) != 3:
            raise FormatError(f"expected '<layer> <op> <cost>', got {text!r}", path=path, line=i)
        try:
            layer = int(parts[0])
        except ValueError:
            raise FormatError(f"bad layer index {parts[0]!r}", path=path, line=i) from None
        try:
            value = float(parts[2])
        except ValueError:
            raise FormatError(f"bad cost value {parts[2]!r}", path=path, line=i) from None
        if not np.isfinite(value) or value < 0:
            raise FormatError(f"cost must be finite and >= 0, got {parts[2]}", path=path, line=i)
        key = (layer, parts[1])
        if key in table.entries:
            raise FormatError(f"duplicate entry for layer {layer} op {parts[1]!r}", path=path, line=i)
        table.entries[key] = value
    return table
