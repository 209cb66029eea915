#!/usr/bin/env python3
# Bilevel search on a two-candidate toy: a task that needs a 7x7
# receptive field, searched over {MBConv k3-e3, MBConv k7-e6}. Without
# cost pressure the search picks the big kernel; with a heavy cost
# weight it picks the cheap one. Takes a couple of minutes on CPU.

import numpy as np

from posenas.autograd import Tensor
from posenas.cost import CostTable, RegularizerConfig, flops_of
from posenas.nn import MBConv, MBConvSpec, Module
from posenas.search import SearchEngine, SearchSchedule
from posenas.supernet import MixedLayer, op_id


def box(x, k):
    n, c, h, w = x.shape
    p = k // 2
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    xp[:, :, p : p + h, p : p + w] = x
    out = np.zeros_like(x, dtype=np.float64)
    for u in range(k):
        for v in range(k):
            out += xp[:, :, u : u + h, v : v + w]
    return out / (k * k)


def ring_task(n, seed, amplitude=0.5, size=16, channels=4):
    # y = x + a * (mean over the 7x7 ring outside the central 3x3):
    # independent of anything a 3x3 receptive field can see.
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, channels, size, size)).astype(np.float32)
    ring = (box(x, 7) * 49 - box(x, 3) * 9) / 40
    return x, (x + amplitude * ring).astype(np.float32)


class TwoCandidateModel(Module):
    def __init__(self, channels=4, seed=0):
        rng = np.random.default_rng(seed)
        layer = MixedLayer(0, 0, channels, channels, 1, (3,), (3,), rng)
        specs = [MBConvSpec(3, 3, 1, channels, channels), MBConvSpec(7, 6, 1, channels, channels)]
        layer.candidate_specs = specs
        layer.candidates = [MBConv(s, rng) for s in specs]
        layer.alpha = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
        self.layers = [layer]
        self.supernet = self  # the engine only needs .layers / .alphas

    def alphas(self):
        return [self.layers[0].alpha]

    def weight_params(self):
        return [t for n, t in self.named_params() if not n.endswith(".alpha")]

    def arch_params(self):
        return self.alphas()

    def forward(self, x, training=False, drop=None):
        return self.layers[0].forward(x, training, drop.get(0) if drop else None)


train = ring_task(128, seed=0)
val = ring_task(48, seed=1)

for lam in (0.0, 10.0):
    model = TwoCandidateModel(seed=0)
    layer = model.layers[0]
    table = CostTable(benchmark="flops", unit="mflops")
    for spec in layer.candidate_specs:
        table.entries[(0, op_id(spec))] = flops_of(spec, (4, 16, 16)) / 1e6
    print(f"\nlambda = {lam}; candidate costs:",
          {o: round(table.cost(0, o), 3) for o in layer.candidate_ids}, "MFLOPs")
    schedule = SearchSchedule(
        warmup_epochs=80, joint_epochs=32, batch_size=16,
        weight_lr=0.01, arch_lr=0.08, drop_path_rate=0.0, seed=0,
    )
    reg = RegularizerConfig(lam=lam, tau=2.0) if lam > 0 else None
    engine = SearchEngine(model, train, val, schedule, table, reg)
    engine.warmup_weights()
    engine.joint_search()
    probs = layer.probs_np()
    print(f"final probabilities: k3 {probs[0]:.3f}, k7 {probs[1]:.3f}")
    print(f"final expected cost: {engine.trace.records[-1]['cost']:.4f} MFLOPs")
    print("chosen:", layer.candidate_ids[int(np.argmax(probs))])
