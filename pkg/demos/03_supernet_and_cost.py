#!/usr/bin/env python3
# The relaxed search space and the differentiable cost model: per-layer
# candidate sets, probability mixing, drop-path, FLOPs lookup tables and
# the expected-cost regularizer.

import numpy as np

from posenas.autograd import Tensor, backward, no_grad
from posenas.cost import (
    RegularizerConfig, build_flops_table, cost_regularizer, expected_total_cost,
    flops_of, uniform_expected_cost,
)
from posenas.supernet import build_supernet, desk_config, drop_path, table1_small_config

# ---------------------------------------------------------------------------
# The desk-scale space mirrors the full-scale "small" layout with widths
# divided by four and two layers per stage: same 4-downsampling topology,
# CPU-sized compute.

cfg = desk_config()
sn = build_supernet(cfg, seed=0)
print("desk supernet:", len(sn.layers), "searchable layers")
for layer, shape in zip(sn.layers, sn.layer_input_shapes()):
    print(f"  layer {layer.index} stage {layer.stage} in {shape} -> w{layer.out_ch} s{layer.stride}"
          f"  candidates: {layer.candidate_ids}")

full = table1_small_config()
print("full-scale small setting:", sum(s.depth for s in full.stages), "layers,",
      f"input {full.input_size} -> trunk {full.feature_size()}x{full.feature_size()}")

# ---------------------------------------------------------------------------
# Mixed forward: softmax(alpha) weights every candidate's output. With a
# fixed seed, drop-path keeps a random subset and renormalizes.

x = Tensor(np.random.default_rng(1).standard_normal((2, 1, 64, 64)).astype(np.float32))
with no_grad():
    print("trunk output:", sn(x, training=True).shape)

rng = np.random.default_rng(7)
active, probs = drop_path(sn.layers[0], drop_rate=0.3, rng=rng)
print("drop-path example: active mask", active.astype(int), "probs", np.round(probs, 3),
      "sum", probs.sum())

# ---------------------------------------------------------------------------
# Every (layer, candidate) pair gets a cost entry; skip is free under
# FLOPs. The expected network cost is linear per layer and differentiable
# through the probabilities.

table = build_flops_table(sn)
print("table entries:", len(table.entries), "unit:", table.unit)
print("layer 6 candidate costs (MFLOPs):",
      {o: round(table.cost(6, o), 4) for o in sn.layers[6].candidate_ids})

cost = expected_total_cost(sn, table)
print("expected cost at uniform alpha:", round(cost.item(), 4), "MFLOPs",
      "(closed form:", round(uniform_expected_cost(sn, table), 4), ")")

reg = RegularizerConfig(lam=0.5, tau=2.0)
loss = cost_regularizer(cost, reg)
backward(loss)
print("d(lambda*log_tau cost)/d(alpha) for layer 0:", np.round(sn.layers[0].alpha.grad, 5))
