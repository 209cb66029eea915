#!/usr/bin/env python3
# A compressed end-to-end run: synthesize keypoint data, search a
# backbone, derive the discrete architecture, train it and evaluate PCK.
# This uses a reduced budget so it finishes in a few minutes; the
# full desk-scale run is `posenas run` (or PipelineConfig() defaults).

import numpy as np

from posenas.arch import derive_architecture, assemble_network, network_flops, serialize
from posenas.data import make_arrays, synth_dataset
from posenas.pipeline import PipelineConfig, evaluate, flops_table_for, train_derived
from posenas.search import build_search_model, run_search, split_dataset

cfg = PipelineConfig()
cfg.data_n = 160
cfg.schedule = type(cfg.schedule)(
    warmup_epochs=2, joint_epochs=6, batch_size=16,
    weight_lr=0.02, arch_lr=0.03, seed=3,
)
cfg.train_epochs = 25

print("generating", cfg.data_n, "stick-figure samples ...")
samples = synth_dataset(cfg.data_n, cfg.data_size, cfg.data_keypoints, cfg.data_seed)
heldout = synth_dataset(40, cfg.data_size, cfg.data_keypoints, cfg.eval_seed)
split = split_dataset(samples, 0.8, cfg.split_seed)
train = make_arrays(split.train, cfg.heatmap_size, cfg.sigma)
val = make_arrays(split.val, cfg.heatmap_size, cfg.sigma)

print("searching ...")
model = build_search_model(cfg.supernet, cfg.head, seed=cfg.schedule.seed)
table = flops_table_for(model)
reg = cfg.regularizer(model, table)
trace = run_search(model, train, val, cfg.schedule, table, reg)
print("final expected cost:", round(trace.records[-1]["cost"], 3), table.unit)

desc = derive_architecture(model.supernet, cfg.head, table)
print("derived architecture:\n" + serialize(desc))
print("network cost:", round(network_flops(desc) / 1e6, 3), "MFLOPs")

print("training the derived network ...")
net = assemble_network(desc, seed=cfg.train_seed)
net, fit_trace = train_derived(
    net, (samples, heldout), cfg.train_epochs, seed=cfg.train_seed,
    sigma=cfg.sigma, lr=cfg.train_lr, batch_size=cfg.train_batch,
)
pck, _ = evaluate(net, heldout, cfg.pck_alpha, sigma=cfg.sigma)
print(f"held-out PCK@{cfg.pck_alpha:g} = {pck:.3f}")
