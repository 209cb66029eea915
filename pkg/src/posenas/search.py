"""Bilevel search: alternating weight / architecture-parameter updates.

One search epoch is a full pass of weight updates on the training split
(SGD with momentum, cosine learning rate, drop-path active, architecture
parameters entering as constants) followed by a pass of architecture
updates on the held-out split (Adam, drop-path off, weights frozen:
only the architecture parameters are stepped).

The cost term of the loss depends only on the architecture parameters,
so weight phases minimize the plain heatmap MSE; both terms are present
in the architecture phases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .arch import (
    ArchitectureDescriptor,
    Head,
    HeadConfig,
    LayerChoice,
    StemSpec,
    assemble_network,
)
from .autograd import Tensor, add, backward, mse, no_grad, scalar_mul
from .cost import CostTable, RegularizerConfig, cost_regularizer, expected_total_cost
from .data import decode_keypoints, pck
from .nn import Module
from .supernet import (
    SKIP,
    Supernet,
    SupernetConfig,
    candidate_ids_for,
    drop_path,
    layer_plan,
)

__all__ = [
    "SearchSchedule",
    "SplitDataset",
    "split_dataset",
    "SGD",
    "Adam",
    "cosine_lr",
    "heatmap_mse",
    "total_loss",
    "SearchModel",
    "build_search_model",
    "SearchEngine",
    "run_search",
    "SearchTrace",
    "fit_network",
    "predict_heatmaps",
    "random_search_baseline",
]


@dataclass(frozen=True)
class SearchSchedule:
    warmup_epochs: int = 5
    joint_epochs: int = 15
    batch_size: int = 16
    weight_lr: float = 0.05
    weight_momentum: float = 0.9
    weight_decay: float = 1e-4
    arch_lr: float = 3e-4
    arch_betas: tuple = (0.9, 0.999)
    drop_path_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.warmup_epochs < 0:
            raise ValueError("warmup epochs must be >= 0")
        if self.joint_epochs < 1:
            raise ValueError("joint epochs must be >= 1")
        if self.weight_lr <= 0 or self.arch_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class SplitDataset:
    train: list
    val: list
    seed: int


def split_dataset(data, fraction: float = 0.8, seed: int = 0) -> SplitDataset:
    """Deterministic shuffled split; same seed, same member lists."""
    items = list(data)
    if not items:
        raise ValueError("cannot split an empty dataset")
    if not (0.0 < fraction < 1.0):
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(items))
    n_train = int(round(len(items) * fraction))
    if len(items) > 1:
        n_train = min(max(n_train, 1), len(items) - 1)
    train = [items[i] for i in perm[:n_train]]
    val = [items[i] for i in perm[n_train:]]
    return SplitDataset(train=train, val=val, seed=seed)


class SGD:
    """SGD with momentum and decoupled-into-gradient weight decay."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.vel = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        for p, v in zip(self.params, self.vel):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v


class Adam:
    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def cosine_lr(base: float, step: int, total_steps: int) -> float:
    """Cosine decay from base at step 0 to exactly 0 at the final step."""
    if total_steps <= 1:
        return base
    t = min(max(step, 0), total_steps - 1)
    return 0.5 * base * (1.0 + math.cos(math.pi * t / (total_steps - 1)))


def heatmap_mse(pred: Tensor, target) -> Tensor:
    """Mean over batch and channels of the squared map error.

    For (B, K, h, w) maps this is sum((pred - gt)^2) / (B * K): the
    per-channel squared L2 norm averaged over keypoint channels and the
    batch.
    """
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target), dtype=pred.dtype)
    hw = float(pred.shape[-1] * pred.shape[-2])
    return scalar_mul(mse(pred, t), hw)


def total_loss(pred: Tensor, gt, supernet: Supernet, table: CostTable = None,
               reg: RegularizerConfig = None) -> Tensor:
    """Heatmap MSE plus lambda * log_tau(expected cost) when configured."""
    loss = heatmap_mse(pred, gt)
    if reg is not None and reg.lam > 0:
        if table is None:
            raise ValueError("cost regularization requires a cost table")
        loss = add(loss, cost_regularizer(expected_total_cost(supernet, table), reg))
    return loss


class SearchModel(Module):
    """Supernet trunk plus a fixed (non-searched) head."""

    def __init__(self, supernet: Supernet, head_cfg: HeadConfig, rng, dtype=np.float32):
        self.supernet = supernet
        self.head_config = head_cfg
        self.head = Head(supernet.out_channels, head_cfg, rng, dtype)

    def forward(self, x, training: bool = False, drop=None):
        return self.head(self.supernet(x, training, drop=drop), training)

    def weight_params(self):
        return [t for name, t in self.named_params() if not name.endswith(".alpha")]

    def arch_params(self):
        return self.supernet.alphas()


def build_search_model(config: SupernetConfig, head_cfg: HeadConfig,
                       seed: int = 0, dtype=np.float32) -> SearchModel:
    rng = np.random.default_rng(seed)
    supernet = Supernet(config, rng, dtype)
    return SearchModel(supernet, head_cfg, rng, dtype)


@dataclass
class SearchTrace:
    records: list = field(default_factory=list)
    prob_snapshots: list = field(default_factory=list)  # (epoch, [per-layer probs])

    def log(self, epoch: int, phase: str, loss: float, mse_v: float, cost: float):
        self.records.append(
            {"epoch": epoch, "phase": phase, "loss": loss, "mse": mse_v, "cost": cost}
        )

    def snapshot(self, epoch: int, supernet: Supernet):
        self.prob_snapshots.append(
            (epoch, [layer.probs_np().copy() for layer in supernet.layers])
        )

    def lines(self):
        out = []
        snaps = dict(self.prob_snapshots)
        for rec in self.records:
            out.append(
                "epoch {epoch} phase {phase} loss {loss:.8g} mse {mse:.8g} cost {cost:.8g}".format(**rec)
            )
            if rec["phase"] == "a" and rec["epoch"] in snaps:
                for li, probs in enumerate(snaps[rec["epoch"]]):
                    out.append(
                        f"probs {li} " + " ".join(f"{p:.8g}" for p in probs)
                    )
        return out

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.lines()) + "\n")


class SearchEngine:
    """Owns the optimizers, RNG streams and step counters of one search."""

    def __init__(self, model: SearchModel, train, val, schedule: SearchSchedule,
                 table: CostTable = None, reg: RegularizerConfig = None):
        self.model = model
        self.train_x, self.train_y = train
        self.val_x, self.val_y = val
        self.schedule = schedule
        self.table = table
        self.reg = reg
        if reg is not None and reg.lam > 0:
            if table is None:
                raise ValueError("cost regularization requires a cost table")
            table.covers(model.supernet)
        self.weight_opt = SGD(
            model.weight_params(), schedule.weight_momentum, schedule.weight_decay
        )
        self.arch_opt = Adam(model.arch_params(), schedule.arch_lr, schedule.arch_betas)
        self.rng = np.random.default_rng(schedule.seed)
        steps = -(-len(self.train_x) // schedule.batch_size)
        self.total_weight_steps = (schedule.warmup_epochs + schedule.joint_epochs) * steps
        self.weight_step = 0
        self.epoch = 0
        self.trace = SearchTrace()
        self._warmed = schedule.warmup_epochs == 0

    def _cost_value(self) -> float:
        if self.table is None:
            return 0.0
        with no_grad():
            return expected_total_cost(self.model.supernet, self.table).item()

    def _reg_value(self, cost: float) -> float:
        if self.reg is None or self.reg.lam == 0 or cost <= 0:
            return 0.0
        return cost_regularizer(cost, self.reg)

    def _weight_epoch(self):
        sched = self.schedule
        n = len(self.train_x)
        order = self.rng.permutation(n)
        mse_sum, batches = 0.0, 0
        for lo in range(0, n, sched.batch_size):
            idx = order[lo : lo + sched.batch_size]
            xb = Tensor(self.train_x[idx])
            drop = {
                layer.index: drop_path(layer, sched.drop_path_rate, self.rng)
                for layer in self.model.supernet.layers
            }
            pred = self.model(xb, training=True, drop=drop)
            loss = heatmap_mse(pred, self.train_y[idx])
            self.weight_opt.zero_grad()
            backward(loss)
            lr = cosine_lr(sched.weight_lr, self.weight_step, self.total_weight_steps)
            self.weight_opt.step(lr)
            self.weight_step += 1
            mse_sum += loss.item()
            batches += 1
        mean_mse = mse_sum / max(batches, 1)
        cost = self._cost_value()
        self.trace.log(self.epoch, "w", mean_mse + self._reg_value(cost), mean_mse, cost)

    def _arch_epoch(self):
        sched = self.schedule
        n = len(self.val_x)
        order = self.rng.permutation(n)
        loss_sum, mse_sum, batches = 0.0, 0.0, 0
        for lo in range(0, n, sched.batch_size):
            idx = order[lo : lo + sched.batch_size]
            xb = Tensor(self.val_x[idx])
            pred = self.model(xb, training=False)
            mse_t = heatmap_mse(pred, self.val_y[idx])
            if self.reg is not None and self.reg.lam > 0:
                cost_t = expected_total_cost(self.model.supernet, self.table)
                loss = add(mse_t, cost_regularizer(cost_t, self.reg))
            else:
                loss = mse_t
            self.arch_opt.zero_grad()
            backward(loss)
            self.arch_opt.step()
            loss_sum += loss.item()
            mse_sum += mse_t.item()
            batches += 1
        cost = self._cost_value()
        self.trace.log(
            self.epoch, "a", loss_sum / max(batches, 1), mse_sum / max(batches, 1), cost
        )
        self.trace.snapshot(self.epoch, self.model.supernet)

    def warmup_weights(self):
        """Weight-only epochs; architecture parameters stay untouched."""
        for _ in range(self.schedule.warmup_epochs):
            self._weight_epoch()
            self.epoch += 1
        self._warmed = True
        return self.trace

    def joint_search(self, skip_warmup: bool = False):
        """Alternating weight / architecture epochs after warmup."""
        if not self._warmed and not skip_warmup:
            raise RuntimeError(
                "warmup has not run; call warmup_weights() first or pass skip_warmup=True"
            )
        for _ in range(self.schedule.joint_epochs):
            self._weight_epoch()
            self._arch_epoch()
            self.epoch += 1
        return self.trace


def run_search(model: SearchModel, train, val, schedule: SearchSchedule,
               table: CostTable = None, reg: RegularizerConfig = None) -> SearchTrace:
    """Warmup followed by the joint bilevel loop; returns the full trace."""
    engine = SearchEngine(model, train, val, schedule, table, reg)
    engine.warmup_weights()
    engine.joint_search()
    return engine.trace


def predict_heatmaps(net, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode forward in batches; returns stacked heatmaps."""
    outs = []
    with no_grad():
        for lo in range(0, len(x), batch_size):
            outs.append(net(Tensor(x[lo : lo + batch_size]), training=False).data)
    return np.concatenate(outs, axis=0)


def fit_network(
    net,
    train,
    epochs: int,
    seed: int = 0,
    lr: float = 1e-3,
    batch_size: int = 16,
    milestones=(0.75, 0.85),
    val=None,
    val_samples=None,
    pck_alpha: float = 0.2,
    pck_scale: float = 4.0,
):
    """Adam training of a derived network on (X, Y) heatmap targets.

    The learning rate drops by 0.1 at each milestone fraction of the
    total epochs. Returns a per-epoch trace with train loss and, when
    validation samples are given, validation PCK.
    """
    x, y = train
    rng = np.random.default_rng(seed)
    opt = Adam(net.params(), lr)
    drops = sorted(int(np.floor(m * epochs)) for m in milestones)
    trace = []
    for epoch in range(epochs):
        factor = 10.0 ** -sum(1 for d in drops if epoch >= d)
        order = rng.permutation(len(x))
        loss_sum, batches = 0.0, 0
        for lo in range(0, len(x), batch_size):
            idx = order[lo : lo + batch_size]
            pred = net(Tensor(x[idx]), training=True)
            loss = heatmap_mse(pred, y[idx])
            opt.zero_grad()
            backward(loss)
            opt.step(lr * factor)
            loss_sum += loss.item()
            batches += 1
        rec = {"epoch": epoch, "train_loss": loss_sum / max(batches, 1)}
        if val is not None and val_samples is not None:
            maps = predict_heatmaps(net, val[0], batch_size)
            preds = [decode_keypoints(m, pck_scale) for m in maps]
            rec["val_pck"] = pck(preds, val_samples, pck_alpha)
        trace.append(rec)
    return trace


def random_search_baseline(
    space: SupernetConfig,
    head_cfg: HeadConfig,
    train,
    val,
    val_samples,
    n: int,
    epochs_each: int,
    seed: int = 0,
    batch_size: int = 16,
    lr: float = 1e-3,
    pck_alpha: float = 0.2,
):
    """Uniformly sample n discrete architectures, quick-train, keep the best.

    Per-architecture training seeds derive from the sampling seed by
    index, so the whole baseline is reproducible. Returns
    (best descriptor, per-architecture results).
    """
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    plan = layer_plan(space)
    out_size = space.feature_size() * 4  # two stride-2 deconvolutions
    pck_scale = space.input_size / out_size
    results = []
    best = None
    for i in range(n):
        choices = []
        for idx, stage_i, in_ch, out_ch, stride, _shape in plan:
            ids = candidate_ids_for(space, in_ch, out_ch, stride)
            pick = ids[rng.integers(len(ids))]
            if pick == SKIP:
                choices.append(LayerChoice.skip(idx, stage_i))
            else:
                k = int(pick.split("-k")[1].split("-e")[0])
                e = int(pick.split("-e")[1])
                choices.append(LayerChoice.mbconv(idx, stage_i, k, e, out_ch, stride))
        desc = ArchitectureDescriptor(
            input_h=space.input_size,
            input_w=space.input_size,
            input_ch=space.in_channels,
            stem=StemSpec(space.stem_width, space.stem_sep_width),
            layers=tuple(choices),
            head=head_cfg,
        )
        net = assemble_network(desc, seed=seed + 1000 * (i + 1))
        trace = fit_network(
            net, train, epochs_each, seed=seed + 1000 * (i + 1), lr=lr,
            batch_size=batch_size, val=val, val_samples=val_samples, pck_alpha=pck_alpha,
            pck_scale=pck_scale,
        )
        score = trace[-1]["val_pck"] if trace else 0.0
        results.append({"index": i, "descriptor": desc, "val_pck": score})
        if best is None or score > best["val_pck"]:
            best = results[-1]
    return best["descriptor"], results
