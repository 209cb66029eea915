"""End-to-end plumbing: configs, model files, derived-network training,
evaluation, the checkerboard-artifact score and the SIC ablation.

The config file is flat ``key = value`` text with ``[section]`` headers;
section names become key prefixes ("search.seed"). Every run artifact
(cost table, search state, trace, architecture, model weights, metrics)
is a versioned text or binary file with a strict parser.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .arch import (
    ArchitectureDescriptor,
    HeadConfig,
    assemble_network,
    derive_architecture,
    head_flops,
    network_flops,
    save_arch,
    save_search_state,
)
from .autograd import Tensor, no_grad
from .cost import (
    CostTable,
    RegularizerConfig,
    build_flops_table,
    save_cost_table,
    stem_flops,
    uniform_expected_cost,
)
from .data import (
    decode_keypoints,
    load_annotations,
    make_arrays,
    pck,
    save_dataset,
    synth_dataset,
)
from .fileio import FormatError, load_weights, save_weights
from .search import (
    SearchModel,
    SearchSchedule,
    build_search_model,
    fit_network,
    predict_heatmaps,
    random_search_baseline,
    run_search,
    split_dataset,
)
from .supernet import StageSpec, SupernetConfig, desk_config, table1_small_config

__all__ = [
    "checkerboard_score",
    "save_model",
    "load_model_into",
    "parse_config",
    "PipelineConfig",
    "flops_table_for",
    "train_derived",
    "evaluate",
    "ablate_sic",
    "SicReport",
    "run_pipeline",
]


def checkerboard_score(feature_map: np.ndarray, eps: float = 1e-8) -> float:
    """Stride-2 phase-imbalance score of a feature map, in [0, 1].

    The channel mean's interior (1-pixel border excluded) is split into
    the four (row, column) parity grids; the score is the variance of
    the four phase means over the variance of all interior pixels.
    Constant maps score 0; a strict period-2 pattern scores ~1.
    """
    fmap = np.asarray(feature_map, dtype=np.float64)
    if fmap.ndim == 3:
        fmap = fmap.mean(axis=0)
    if fmap.ndim != 2:
        raise ValueError(f"expected a 2-D or (C, H, W) map, got shape {fmap.shape}")
    h, w = fmap.shape
    if h < 4 or w < 4 or h % 2 or w % 2:
        raise ValueError(f"map must be even-sized and at least 4x4, got {h}x{w}")
    interior = fmap[1:-1, 1:-1]
    phases = [interior[r::2, c::2] for r in range(2) for c in range(2)]
    means = np.array([p.mean() for p in phases])
    total_var = interior.var()
    score = means.var() / (total_var + eps)
    return float(np.clip(score, 0.0, 1.0))


def save_model(net, path) -> None:
    """Write parameters and normalization buffers as an `epmodel v1` file."""
    items = [(name, t.data) for name, t in net.named_params()]
    items += [(name, buf) for name, buf in net.named_buffers()]
    save_weights(path, items)


def load_model_into(net, path) -> None:
    """Load weights into an assembled network; names and shapes must match."""
    arrays = load_weights(path)
    targets = {name: t for name, t in net.named_params()}
    buffers = {name: b for name, b in net.named_buffers()}
    expected = set(targets) | set(buffers)
    got = set(arrays)
    if expected != got:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise FormatError(
            f"weight file does not match network: missing {missing[:4]}, unexpected {extra[:4]}",
            path=path,
        )
    for name, arr in arrays.items():
        dest = targets[name].data if name in targets else buffers[name]
        if dest.shape != arr.shape:
            raise FormatError(
                f"shape mismatch for {name!r}: file {arr.shape}, network {dest.shape}",
                path=path,
            )
        dest[...] = arr.astype(dest.dtype)


# ---------------------------------------------------------------------------
# configuration


def parse_config(path) -> dict:
    """Flat key = value file with [section] prefixes and # comments."""
    values = {}
    section = ""
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if not section:
                    raise FormatError("empty section name", path=path, line=lineno)
                continue
            if "=" not in line:
                raise FormatError(f"expected 'key = value', got {line!r}", path=path, line=lineno)
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise FormatError("empty key", path=path, line=lineno)
            full = f"{section}.{key}" if section else key
            values[full] = value
    return values


def _parse_stages(text: str):
    stages = []
    for part in text.split(","):
        fields = part.strip().split(":")
        if len(fields) != 3:
            raise ValueError(f"stage spec must be width:stride:depth, got {part!r}")
        stages.append(StageSpec(int(fields[0]), int(fields[1]), int(fields[2])))
    return tuple(stages)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _as_bool(value: str) -> bool:
    v = value.lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


@dataclass
class PipelineConfig:
    """Everything one run needs; see the README for the full key list."""

    # [data]
    data_n: int = 360
    data_size: int = 64
    data_keypoints: int = 8
    data_seed: int = 11
    data_dir: str = ""
    eval_n: int = 60
    eval_seed: int = 9011
    # [supernet]
    supernet: SupernetConfig = field(default_factory=desk_config)
    # [head]
    head: HeadConfig = field(default_factory=lambda: HeadConfig(w1=16, w2=8, keypoints=8))
    # [search]
    schedule: SearchSchedule = field(
        default_factory=lambda: SearchSchedule(weight_lr=0.005, arch_lr=0.03)
    )
    split_fraction: float = 0.8
    split_seed: int = 7
    # [regularizer]
    reg_lambda: float = 0.1
    reg_tau: float = 0.0  # 0 means: default to max(2, uniform expected cost)
    # [train]
    train_epochs: int = 45
    train_lr: float = 2e-3  # desk-scale value; full-scale setting is 1e-3
    train_batch: int = 16
    train_seed: int = 5
    # [eval]
    pck_alpha: float = 0.2
    sigma: float = 2.0
    # [random]
    random_n: int = 10
    random_epochs_each: int = 2
    random_seed: int = 23
    # [pipeline]
    out_dir: str = "runs/out"

    @property
    def heatmap_size(self) -> int:
        return self.supernet.feature_size() * 4

    @property
    def pck_scale(self) -> float:
        return self.supernet.input_size / self.heatmap_size

    @classmethod
    def from_file(cls, path, overrides: dict = None) -> "PipelineConfig":
        values = parse_config(path)
        if overrides:
            values.update({k: str(v) for k, v in overrides.items() if v is not None})
        return cls.from_values(values, base=os.path.dirname(os.path.abspath(path)))

    @classmethod
    def from_values(cls, values: dict, base: str = ".") -> "PipelineConfig":
        cfg = cls()

        def geti(key, default):
            return int(values[key]) if key in values else default

        def getf(key, default):
            return float(values[key]) if key in values else default

        def gets(key, default):
            return values.get(key, default)

        cfg.data_n = geti("data.n", cfg.data_n)
        cfg.data_size = geti("data.size", cfg.data_size)
        cfg.data_keypoints = geti("data.keypoints", cfg.data_keypoints)
        cfg.data_seed = geti("data.seed", cfg.data_seed)
        cfg.data_dir = gets("data.dir", cfg.data_dir)
        cfg.eval_n = geti("data.eval_n", cfg.eval_n)
        cfg.eval_seed = geti("data.eval_seed", cfg.eval_seed)
        if cfg.data_dir:
            cfg.data_dir = os.path.join(base, cfg.data_dir) if not os.path.isabs(cfg.data_dir) else cfg.data_dir
            ann = os.path.join(cfg.data_dir, "annotations.jsonl")
            if not os.path.isfile(ann):
                raise FileNotFoundError(f"configured data.dir has no annotations file: {ann}")

        preset = gets("supernet.preset", "desk")
        if preset == "desk":
            sup = desk_config(cfg.data_size, 1)
        elif preset == "small":
            sup = table1_small_config(cfg.data_size, 1)
        else:
            raise ValueError(f"unknown supernet preset {preset!r} (use desk or small)")
        sup_kwargs = {}
        if "supernet.input_size" in values:
            sup_kwargs["input_size"] = int(values["supernet.input_size"])
        if "supernet.in_channels" in values:
            sup_kwargs["in_channels"] = int(values["supernet.in_channels"])
        if "supernet.stem_width" in values:
            sup_kwargs["stem_width"] = int(values["supernet.stem_width"])
        if "supernet.stem_sep_width" in values:
            sup_kwargs["stem_sep_width"] = int(values["supernet.stem_sep_width"])
        if "supernet.stages" in values:
            sup_kwargs["stages"] = _parse_stages(values["supernet.stages"])
        if "supernet.kernels" in values:
            sup_kwargs["kernels"] = tuple(int(v) for v in values["supernet.kernels"].split(","))
        if "supernet.expansions" in values:
            sup_kwargs["expansions"] = tuple(int(v) for v in values["supernet.expansions"].split(","))
        cfg.supernet = replace(sup, **sup_kwargs) if sup_kwargs else sup

        cfg.head = HeadConfig(
            w1=geti("head.w1", 16),
            w2=geti("head.w2", 8),
            sic=_as_bool(gets("head.sic", "1")),
            style=gets("head.style", "plain"),
            keypoints=geti("head.keypoints", cfg.data_keypoints),
        )
        cfg.schedule = SearchSchedule(
            warmup_epochs=geti("search.warmup_epochs", 5),
            joint_epochs=geti("search.joint_epochs", 15),
            batch_size=geti("search.batch_size", 16),
            # desk-scale defaults; full-scale settings are 0.05 (batch 32)
            # and 3e-4 over tens of thousands of arch steps
            weight_lr=getf("search.weight_lr", 0.005),
            weight_momentum=getf("search.weight_momentum", 0.9),
            weight_decay=getf("search.weight_decay", 1e-4),
            arch_lr=getf("search.arch_lr", 0.03),
            drop_path_rate=getf("search.drop_path", 0.2),
            seed=geti("search.seed", 3),
        )
        cfg.split_fraction = getf("search.split_fraction", 0.8)
        cfg.split_seed = geti("search.split_seed", 7)
        cfg.reg_lambda = getf("regularizer.lambda", 0.1)
        cfg.reg_tau = getf("regularizer.tau", 0.0)
        cfg.train_epochs = geti("train.epochs", 45)
        cfg.train_lr = getf("train.lr", 2e-3)
        cfg.train_batch = geti("train.batch_size", 16)
        cfg.train_seed = geti("train.seed", 5)
        cfg.pck_alpha = getf("eval.pck_alpha", 0.2)
        cfg.sigma = getf("eval.sigma", 2.0)
        cfg.random_n = geti("random.n", 10)
        cfg.random_epochs_each = geti("random.epochs_each", 2)
        cfg.random_seed = geti("random.seed", 23)
        out = gets("pipeline.out_dir", cfg.out_dir)
        cfg.out_dir = out if os.path.isabs(out) else os.path.join(base, out)
        if cfg.head.keypoints != cfg.data_keypoints:
            raise ValueError(
                f"head keypoints {cfg.head.keypoints} != data keypoints {cfg.data_keypoints}"
            )
        return cfg

    def regularizer(self, model: SearchModel, table: CostTable) -> RegularizerConfig:
        """Pin tau: configured value, else max(2, uniform expected cost)."""
        tau = self.reg_tau
        if tau <= 0:
            tau = max(2.0, uniform_expected_cost(model.supernet, table))
        return RegularizerConfig(lam=self.reg_lambda, tau=tau)


def flops_table_for(model: SearchModel) -> CostTable:
    """Analytic table for the model's supernet, stem+head as fixed cost."""
    fixed = {
        "stem": stem_flops(model.supernet),
        "head": head_flops(model.supernet.head_in_shape(), model.head_config),
    }
    return build_flops_table(model.supernet, fixed)


def train_derived(network, data, epochs: int, seed: int = 0, *, sigma: float = 2.0,
                  lr: float = 1e-3, batch_size: int = 16, pck_alpha: float = 0.2):
    """Train an assembled network on keypoint samples.

    ``data`` is (train_samples, val_samples); val may be empty. Returns
    (network, per-epoch trace).
    """
    train_samples, val_samples = data
    out_size = network.descriptor.input_h // 4
    train = make_arrays(train_samples, out_size, sigma)
    val = make_arrays(val_samples, out_size, sigma) if val_samples else None
    trace = fit_network(
        network, train, epochs, seed=seed, lr=lr, batch_size=batch_size,
        val=val, val_samples=val_samples if val_samples else None,
        pck_alpha=pck_alpha, pck_scale=4.0,
    )
    return network, trace


def evaluate(network, samples, pck_alpha: float = 0.2, batch_size: int = 64,
             sigma: float = 2.0):
    """Eval-mode PCK of a trained network on labelled samples."""
    out_size = network.descriptor.input_h // 4
    x, _ = make_arrays(samples, out_size, sigma)
    maps = predict_heatmaps(network, x, batch_size)
    preds = [decode_keypoints(m, network.descriptor.input_h / out_size) for m in maps]
    return pck(preds, samples, pck_alpha), preds


def _mean_tap_checkerboard(network, x: np.ndarray, tap: str, batch_size: int = 32) -> float:
    scores = []
    with no_grad():
        for lo in range(0, len(x), batch_size):
            _, taps = network.forward_taps(Tensor(x[lo : lo + batch_size]), training=False)
            fmap = taps[tap].data
            for sample_map in fmap:
                scores.append(checkerboard_score(sample_map))
    return float(np.mean(scores))


@dataclass
class SicVariant:
    sic: bool
    pcks: list
    checkerboards: list
    flops: int

    @property
    def mean_pck(self) -> float:
        return float(np.mean(self.pcks))

    @property
    def mean_checkerboard(self) -> float:
        return float(np.mean(self.checkerboards))


@dataclass
class SicReport:
    on: SicVariant
    off: SicVariant
    seeds: list

    def table_text(self) -> str:
        lines = [f"{'sic':>4} {'pck':>8} {'checkerboard':>12} {'mflops':>10}"]
        for v in (self.on, self.off):
            lines.append(
                f"{'on' if v.sic else 'off':>4} {v.mean_pck:8.4f} "
                f"{v.mean_checkerboard:12.4f} {v.flops / 1e6:10.3f}"
            )
        return "\n".join(lines)


def ablate_sic(samples, base_desc: ArchitectureDescriptor, epochs: int, seeds,
               *, val_fraction: float = 0.2, sigma: float = 2.0,
               batch_size: int = 16, pck_alpha: float = 0.2) -> SicReport:
    """Train SIC-on and SIC-off variants under identical seeds and compare.

    The artifact score is measured on held-out images: after the SIC
    module for the SIC-on variant, after the last upsampling block for
    the SIC-off variant.
    """
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("need at least two seeds")
    split = split_dataset(samples, 1.0 - val_fraction, seed=max(seeds) + 1)
    out_size = base_desc.input_h // 4
    val_x, _ = make_arrays(split.val, out_size, sigma)
    variants = {}
    for sic_on in (True, False):
        desc = replace(base_desc, head=replace(base_desc.head, sic=sic_on))
        pcks, boards = [], []
        for seed in seeds:
            net = assemble_network(desc, seed=seed)
            net, _ = train_derived(
                net, (split.train, []), epochs, seed=seed, sigma=sigma,
                batch_size=batch_size, pck_alpha=pck_alpha,
            )
            score, _ = evaluate(net, split.val, pck_alpha, sigma=sigma)
            pcks.append(score)
            boards.append(
                _mean_tap_checkerboard(net, val_x, "post_sic" if sic_on else "post_deconv")
            )
        variants[sic_on] = SicVariant(sic_on, pcks, boards, network_flops(desc))
    return SicReport(on=variants[True], off=variants[False], seeds=seeds)


def run_pipeline(cfg: PipelineConfig, *, include_random_baseline: bool = False,
                 write_artifacts: bool = True) -> dict:
    """gen-data -> bench(flops) -> search -> derive -> train -> eval.

    Returns a metrics dict; artifacts (cost table, search state, trace,
    architecture, model, metrics) land in cfg.out_dir when requested.
    """
    if cfg.data_dir:
        samples = load_annotations(os.path.join(cfg.data_dir, "annotations.jsonl"))
    else:
        samples = synth_dataset(cfg.data_n, cfg.data_size, cfg.data_keypoints, cfg.data_seed)
    heldout = synth_dataset(cfg.eval_n, cfg.data_size, cfg.data_keypoints, cfg.eval_seed)

    split = split_dataset(samples, cfg.split_fraction, cfg.split_seed)
    out_size = cfg.heatmap_size
    train_arrays = make_arrays(split.train, out_size, cfg.sigma)
    val_arrays = make_arrays(split.val, out_size, cfg.sigma)

    model = build_search_model(cfg.supernet, cfg.head, seed=cfg.schedule.seed)
    table = flops_table_for(model)
    reg = cfg.regularizer(model, table)
    trace = run_search(model, train_arrays, val_arrays, cfg.schedule, table, reg)
    desc = derive_architecture(model.supernet, cfg.head, table)

    network = assemble_network(desc, seed=cfg.train_seed)
    network, train_trace = train_derived(
        network, (samples, heldout), cfg.train_epochs, seed=cfg.train_seed,
        sigma=cfg.sigma, lr=cfg.train_lr, batch_size=cfg.train_batch,
        pck_alpha=cfg.pck_alpha,
    )
    final_pck, _ = evaluate(network, heldout, cfg.pck_alpha, sigma=cfg.sigma)

    metrics = {
        "searched_pck": final_pck,
        "searched_flops": network_flops(desc),
        "expected_cost": trace.records[-1]["cost"],
        "tau": reg.tau,
        "lambda": reg.lam,
    }

    if include_random_baseline:
        best_desc, _results = random_search_baseline(
            cfg.supernet, cfg.head, train_arrays, val_arrays, split.val,
            n=cfg.random_n, epochs_each=cfg.random_epochs_each, seed=cfg.random_seed,
            batch_size=cfg.schedule.batch_size, lr=cfg.train_lr, pck_alpha=cfg.pck_alpha,
        )
        rnd_net = assemble_network(best_desc, seed=cfg.train_seed)
        rnd_net, _ = train_derived(
            rnd_net, (samples, []), cfg.train_epochs, seed=cfg.train_seed,
            sigma=cfg.sigma, lr=cfg.train_lr, batch_size=cfg.train_batch,
            pck_alpha=cfg.pck_alpha,
        )
        rnd_pck, _ = evaluate(rnd_net, heldout, cfg.pck_alpha, sigma=cfg.sigma)
        metrics["random_pck"] = rnd_pck
        metrics["random_flops"] = network_flops(best_desc)

    if write_artifacts:
        os.makedirs(cfg.out_dir, exist_ok=True)
        save_cost_table(table, os.path.join(cfg.out_dir, "costtable.txt"))
        save_search_state(os.path.join(cfg.out_dir, "search_state.txt"), model.supernet, cfg.head)
        trace.save(os.path.join(cfg.out_dir, "trace.txt"))
        save_arch(desc, os.path.join(cfg.out_dir, "arch.txt"))
        save_model(network, os.path.join(cfg.out_dir, "model.bin"))
        with open(os.path.join(cfg.out_dir, "metrics.txt"), "w") as fh:
            for key in sorted(metrics):
                fh.write(f"{key} = {metrics[key]}\n")
        with open(os.path.join(cfg.out_dir, "train_trace.txt"), "w") as fh:
            for rec in train_trace:
                parts = [f"epoch {rec['epoch']}", f"train_loss {rec['train_loss']:.8g}"]
                if "val_pck" in rec:
                    parts.append(f"val_pck {rec['val_pck']:.6g}")
                fh.write(" ".join(parts) + "\n")

    metrics["descriptor"] = desc
    metrics["trace"] = trace
    metrics["network"] = network
    return metrics
