"""Command line entry points.

Subcommands: gen-data, bench, search, derive, train, eval, flops,
ablate-sic. Every command accepts --config <file>; explicit flags
override values from the file.
"""

from __future__ import annotations

import argparse
import os
import sys

from .arch import (
    assemble_network,
    derive_architecture,
    derive_from_state,
    load_arch,
    network_flops,
    save_arch,
    save_search_state,
)
from .cost import build_latency_table, load_cost_table, save_cost_table
from .data import load_annotations, make_arrays, save_dataset, synth_dataset
from .pipeline import (
    PipelineConfig,
    ablate_sic,
    evaluate,
    flops_table_for,
    load_model_into,
    run_pipeline,
    save_model,
    train_derived,
)
from .search import build_search_model, run_search, split_dataset


def _load_cfg(args, overrides=None) -> PipelineConfig:
    if getattr(args, "config", None):
        return PipelineConfig.from_file(args.config, overrides)
    values = {k: str(v) for k, v in (overrides or {}).items() if v is not None}
    return PipelineConfig.from_values(values)


def cmd_gen_data(args):
    cfg = _load_cfg(args, {
        "data.n": args.n, "data.size": args.size,
        "data.keypoints": args.keypoints, "data.seed": args.seed,
    })
    samples = synth_dataset(cfg.data_n, cfg.data_size, cfg.data_keypoints, cfg.data_seed)
    path = save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {path}")


def cmd_bench(args):
    cfg = _load_cfg(args)
    model = build_search_model(cfg.supernet, cfg.head, seed=cfg.schedule.seed)
    if args.benchmark == "flops":
        table = flops_table_for(model)
    else:
        table = build_latency_table(
            model.supernet, batch=args.batch, reps=args.reps, warmup=args.warmup
        )
    save_cost_table(table, args.out)
    print(f"wrote {len(table.entries)} {args.benchmark} entries to {args.out}")


def cmd_search(args):
    cfg = _load_cfg(args)
    if cfg.data_dir:
        samples = load_annotations(os.path.join(cfg.data_dir, "annotations.jsonl"))
    elif args.data:
        samples = load_annotations(os.path.join(args.data, "annotations.jsonl"))
    else:
        samples = synth_dataset(cfg.data_n, cfg.data_size, cfg.data_keypoints, cfg.data_seed)
    split = split_dataset(samples, cfg.split_fraction, cfg.split_seed)
    train = make_arrays(split.train, cfg.heatmap_size, cfg.sigma)
    val = make_arrays(split.val, cfg.heatmap_size, cfg.sigma)
    model = build_search_model(cfg.supernet, cfg.head, seed=cfg.schedule.seed)
    table = load_cost_table(args.cost_table) if args.cost_table else flops_table_for(model)
    reg = cfg.regularizer(model, table)
    trace = run_search(model, train, val, cfg.schedule, table, reg)
    desc = derive_architecture(model.supernet, cfg.head, table)
    save_arch(desc, args.out)
    if args.state_out:
        save_search_state(args.state_out, model.supernet, cfg.head)
    if args.trace_out:
        trace.save(args.trace_out)
    print(f"search done: cost {trace.records[-1]['cost']:.4g} {table.unit}; arch -> {args.out}")


def cmd_derive(args):
    table = load_cost_table(args.cost_table) if args.cost_table else None
    desc = derive_from_state(args.search_state, table)
    save_arch(desc, args.out)
    print(f"derived architecture -> {args.out}")


def cmd_train(args):
    cfg = _load_cfg(args, {"train.epochs": args.epochs, "train.seed": args.seed})
    desc = load_arch(args.arch)
    samples = load_annotations(os.path.join(args.data, "annotations.jsonl"))
    net = assemble_network(desc, seed=cfg.train_seed)
    net, trace = train_derived(
        net, (samples, []), cfg.train_epochs, seed=cfg.train_seed,
        sigma=cfg.sigma, lr=cfg.train_lr, batch_size=cfg.train_batch,
        pck_alpha=cfg.pck_alpha,
    )
    save_model(net, args.out)
    last = trace[-1]["train_loss"] if trace else float("nan")
    print(f"trained {cfg.train_epochs} epochs (final loss {last:.6g}); model -> {args.out}")


def cmd_eval(args):
    cfg = _load_cfg(args, {"eval.pck_alpha": args.pck_alpha})
    desc = load_arch(args.arch)
    samples = load_annotations(os.path.join(args.data, "annotations.jsonl"))
    net = assemble_network(desc, seed=0)
    load_model_into(net, args.model)
    score, _ = evaluate(net, samples, cfg.pck_alpha, sigma=cfg.sigma)
    print(f"PCK@{cfg.pck_alpha:g} = {score:.4f} over {len(samples)} samples")


def cmd_flops(args):
    desc = load_arch(args.arch)
    total, parts = network_flops(desc, breakdown=True)
    for name in ("stem", "layers", "head"):
        print(f"{name:>6}: {parts[name] / 1e6:10.3f} MFLOPs")
    print(f"{'total':>6}: {total / 1e6:10.3f} MFLOPs")


def cmd_ablate_sic(args):
    cfg = _load_cfg(args)
    desc = load_arch(args.arch)
    samples = load_annotations(os.path.join(args.data, "annotations.jsonl"))
    seeds = [int(s) for s in args.seeds.split(",")]
    report = ablate_sic(
        samples, desc, args.epochs, seeds, sigma=cfg.sigma,
        batch_size=cfg.train_batch, pck_alpha=cfg.pck_alpha,
    )
    print(report.table_text())


def cmd_run(args):
    cfg = _load_cfg(args)
    metrics = run_pipeline(cfg, include_random_baseline=args.random_baseline)
    print(f"searched PCK@{cfg.pck_alpha:g} = {metrics['searched_pck']:.4f}")
    if "random_pck" in metrics:
        print(f"random-baseline PCK@{cfg.pck_alpha:g} = {metrics['random_pck']:.4f}")
    print(f"artifacts in {cfg.out_dir}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="posenas", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic keypoint dataset")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--keypoints", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("bench", help="build a cost lookup table")
    p.add_argument("--config")
    p.add_argument("--benchmark", choices=("flops", "latency"), default="flops")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("search", help="run the bilevel architecture search")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset directory (else config data.dir or synthetic)")
    p.add_argument("--cost-table", dest="cost_table")
    p.add_argument("--out", required=True, help="derived architecture file")
    p.add_argument("--state-out", dest="state_out")
    p.add_argument("--trace-out", dest="trace_out")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("derive", help="derive the discrete architecture from a search state")
    p.add_argument("--search-state", dest="search_state", required=True)
    p.add_argument("--cost-table", dest="cost_table")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_derive)

    p = sub.add_parser("train", help="train a derived architecture")
    p.add_argument("--arch", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="model weights file")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model (PCK)")
    p.add_argument("--model", required=True)
    p.add_argument("--arch", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pck-alpha", dest="pck_alpha", type=float, default=None)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("flops", help="FLOPs breakdown of an architecture file")
    p.add_argument("--arch", required=True)
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("ablate-sic", help="SIC on/off comparison on a dataset")
    p.add_argument("--arch", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_ablate_sic)

    p = sub.add_parser("run", help="full pipeline: data -> search -> train -> eval")
    p.add_argument("--config")
    p.add_argument("--random-baseline", action="store_true")
    p.set_defaults(fn=cmd_run)

    args = parser.parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
