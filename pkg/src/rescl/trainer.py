"""SGD training loop, the full ResCL pipeline and the comparison baselines."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Callable, Mapping

import numpy as np

from . import tensor as tc
from .combine import CombinedNetwork, build_combined, merge, recompute_target_stats
from .data import Dataset, augment, make_rng
from .layers import Network, NetworkSpec, recompute_population_stats, spec_json
from .losses import LossConfig, SoftTargets, kl_tempered, lwf_loss, rescl_total_loss, weight_decay_l2
from .tensor import Tensor

log = logging.getLogger(__name__)

# independent random streams derived from one run seed
_STREAM_INIT, _STREAM_BATCH, _STREAM_AUG, _STREAM_HEAD = 0, 1, 2, 3


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    milestones: tuple[float, ...] = (0.5, 0.75)
    gamma: float = 0.1
    warmup_iterations: int = 500
    continual_lr: float = 0.01  # ResCL combined stage and LwF
    seed: int = 0
    flip: bool = False
    pad_crop: int = 0
    check_finite: bool = False  # per-step NaN/Inf scan of parameters

    def __post_init__(self):
        if self.iterations < 0 or self.warmup_iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.lr <= 0 or self.continual_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")

    def continual(self) -> "TrainConfig":
        """Same schedule with the base rate replaced by ``continual_lr``."""
        return replace(self, lr=self.continual_lr)

    def lr_at(self, it: int, total: int | None = None) -> float:
        total = self.iterations if total is None else total
        drops = sum(1 for m in self.milestones if it >= int(round(m * total)))
        return self.lr * self.gamma ** drops


class MetricsLog:
    """Rows of (stage, iteration, metric, value), written as CSV."""

    def __init__(self):
        self.rows: list[tuple[str, int, str, str]] = []

    def log(self, stage: str, it: int, metric: str, value) -> None:
        if isinstance(value, Fraction):
            value = f"{value.numerator}/{value.denominator}"
        elif isinstance(value, float):
            value = repr(value)
        self.rows.append((stage, it, metric, str(value)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["stage", "iteration", "metric", "value"])
        w.writerows(self.rows)
        return buf.getvalue()


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             velocity: dict[str, np.ndarray], lr: float, momentum: float) -> None:
    """In place: ``v <- momentum * v + g``; ``p <- p - lr * v``.  Missing grads count as zero."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name!r}")
    for name, p in params.items():
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        g = grads.get(name)
        if g is not None:
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
            v += g
        p -= lr * v


class EpochSampler:
    """Fixed-size minibatches from per-epoch permutations; the remainder is dropped."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 2:
            raise ValueError("need at least 2 training samples")
        self.n = n
        self.bs = min(batch_size, n)
        self.rng = rng
        self._perm = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.bs > len(self._perm):
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.bs]
        self._pos += self.bs
        return idx


LossFn = Callable[[np.ndarray], tuple[Tensor, dict[str, Tensor], dict[str, float]]]


def optimize(store: dict[str, np.ndarray], loss_fn: LossFn, n: int, cfg: TrainConfig,
             iterations: int | None = None, stage: str = "train", metrics: MetricsLog | None = None,
             stream: int = _STREAM_BATCH) -> None:
    """Run SGD on the arrays in ``store`` (updated in place)."""
    total = cfg.iterations if iterations is None else iterations
    sampler = EpochSampler(n, cfg.batch_size, make_rng(cfg.seed, stream))
    velocity: dict[str, np.ndarray] = {}
    for it in range(total):
        idx = sampler.next()
        try:
            loss, leaves, parts = loss_fn(idx)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"{stage}: {exc} at iteration {it}") from exc
        value = float(np.asarray(loss.data).item())
        if not np.isfinite(value):
            raise TrainingDiverged(f"{stage}: non-finite loss at iteration {it}")
        loss.backward()
        grads = {k: t.grad for k, t in leaves.items() if t.grad is not None}
        sgd_step(store, grads, velocity, cfg.lr_at(it, total), cfg.momentum)
        if cfg.check_finite:
            for k, v in store.items():
                if not np.all(np.isfinite(v)):
                    raise TrainingDiverged(f"{stage}: parameter {k!r} became non-finite at iteration {it}")
        if metrics is not None:
            metrics.log(stage, it, "loss", value)


def _batch_images(images: np.ndarray, idx: np.ndarray, cfg: TrainConfig, rng, dtype) -> np.ndarray:
    x = images[idx]
    if cfg.flip or cfg.pad_crop:
        x = augment(x, cfg.flip, cfg.pad_crop, rng)
    return x.astype(dtype, copy=False)


def _leaves(path) -> dict[str, Tensor]:
    return {k: t for k, t in path.leaves.items() if t.requires_grad}


# -- evaluation ---------------------------------------------------------------------------

def correct_count(model, ds: Dataset, task: str) -> int:
    pred = model.predict_logits(ds.images, task).argmax(axis=1)
    return int((pred == ds.labels).sum())


def accuracy(model, ds: Dataset, task: str) -> Fraction:
    return Fraction(correct_count(model, ds, task), len(ds))


def evaluate(model, datasets: Mapping[str, Dataset]) -> dict[str, Fraction]:
    return {task: accuracy(model, ds, task) for task, ds in datasets.items()}


# -- stages -------------------------------------------------------------------------------

def train_source(spec: NetworkSpec, train: Dataset, task: str, cfg: TrainConfig,
                 loss_cfg: LossConfig = LossConfig(), dtype=np.float32,
                 metrics: MetricsLog | None = None) -> Network:
    """He-initialized network trained from scratch on one task."""
    rng = make_rng(cfg.seed, _STREAM_INIT)
    net = Network.init(spec, rng, dtype).add_head(task, train.n_classes, rng)
    trainable = list(net.params)
    aug_rng = make_rng(cfg.seed, _STREAM_AUG)

    def loss_fn(idx):
        path = net.path("train", trainable)
        x = Tensor(_batch_images(train.images, idx, cfg, aug_rng, net.dtype))
        logits = net.forward(x, task, path=path)
        ce = kl_tempered(train.labels[idx], logits, 1.0)
        leaves = _leaves(path)
        return ce + weight_decay_l2(leaves.values(), loss_cfg.lam_dec), leaves, {}

    optimize(net.params, loss_fn, len(train), cfg, stage="source", metrics=metrics)
    return recompute_population_stats(net, train.images) if cfg.iterations else net


def warmup_head(net_s: Network, task: str, train: Dataset, cfg: TrainConfig,
                loss_cfg: LossConfig = LossConfig(), metrics: MetricsLog | None = None) -> Network:
    """Attach a head for ``task`` and train only that head; the trunk runs in inference mode."""
    net = net_s.add_head(task, train.n_classes, make_rng(cfg.seed, _STREAM_HEAD))
    with tc.no_grad():
        feats = np.concatenate([
            net.features(train.images[i:i + 512].astype(net.dtype)).data
            for i in range(0, len(train), 512)
        ])
    names = net.head_names(task)
    store = {k: net.params[k] for k in names}

    def loss_fn(idx):
        w = Tensor(store[names[0]], requires_grad=True)
        b = Tensor(store[names[1]], requires_grad=True)
        logits = tc.linear(Tensor(feats[idx]), w, b)
        loss = kl_tempered(train.labels[idx], logits, 1.0) + weight_decay_l2([w, b], loss_cfg.lam_dec)
        return loss, {names[0]: w, names[1]: b}, {}

    optimize(store, loss_fn, len(train), cfg, iterations=cfg.warmup_iterations, stage="warmup",
             metrics=metrics)
    return net


def finetune(net_w: Network, task: str, train: Dataset, cfg: TrainConfig,
             loss_cfg: LossConfig = LossConfig(), metrics: MetricsLog | None = None) -> Network:
    """Train trunk and the ``task`` head with cross-entropy + L2 (other heads untouched)."""
    net = net_w.copy()
    trainable = net.trunk_names() + net.head_names(task)
    aug_rng = make_rng(cfg.seed, _STREAM_AUG)

    def loss_fn(idx):
        path = net.path("train", trainable)
        x = Tensor(_batch_images(train.images, idx, cfg, aug_rng, net.dtype))
        ce = kl_tempered(train.labels[idx], net.forward(x, task, path=path), 1.0)
        leaves = _leaves(path)
        return ce + weight_decay_l2(leaves.values(), loss_cfg.lam_dec), leaves, {}

    store = {k: net.params[k] for k in trainable}
    optimize(store, loss_fn, len(train), cfg, stage="finetune", metrics=metrics)
    return recompute_population_stats(net, train.images) if cfg.iterations else net


def compute_soft_targets(net_s: Network, net_t: Network | None, images: np.ndarray,
                         target_task: str | None, T: float) -> SoftTargets:
    source = {}
    for task in net_s.heads:
        if task != target_task:
            source[task] = tc.softmax_np(net_s.predict_logits(images, task).astype(np.float64), T)
    target = None
    if net_t is not None and target_task is not None:
        target = tc.softmax_np(net_t.predict_logits(images, target_task).astype(np.float64), T)
    return SoftTargets(source, target, T)


def train_combined(c: CombinedNetwork, train: Dataset, soft: SoftTargets, cfg: TrainConfig,
                   loss_cfg: LossConfig, metrics: MetricsLog | None = None) -> CombinedNetwork:
    """Minimize the ResCL objective over alphas, target trunk and target head (in place)."""
    c.stats_final = False
    store = c.param_store()
    trainable = set(store)
    aug_rng = make_rng(cfg.seed, _STREAM_AUG)

    def loss_fn(idx):
        b = c.bind("train", trainable)
        x = Tensor(_batch_images(train.images, idx, cfg, aug_rng, c.dtype))
        loss, parts = rescl_total_loss(b, x, soft.rows(idx), loss_cfg)
        return loss, b.leaves(), parts

    optimize(store, loss_fn, len(train), cfg.continual(), stage="combined", metrics=metrics)
    return recompute_target_stats(c, train.images)


@dataclass
class ResCLResult:
    combined: CombinedNetwork
    merged: Network
    finetuned: Network
    soft: SoftTargets
    warmed: Network


def run_rescl(net_s: Network, task: str, train: Dataset, cfg: TrainConfig,
              loss_cfg: LossConfig = LossConfig(), *, warmed: Network | None = None,
              finetuned: Network | None = None, metrics: MetricsLog | None = None) -> ResCLResult:
    """Warm-up, fine-tune, cache soft targets, combine, train, recompute target BN, merge.

    ``warmed`` / ``finetuned`` let a sweep reuse the lambda-independent stages.
    Source data are never touched.
    """
    warmed = warmed if warmed is not None else warmup_head(net_s, task, train, cfg, loss_cfg, metrics)
    net_t = finetuned if finetuned is not None else finetune(warmed, task, train, cfg, loss_cfg, metrics)
    soft = compute_soft_targets(net_s, net_t, train.images, task, loss_cfg.temperature)
    c = build_combined(net_s, net_t, task, loss_cfg.parameterization)
    c = train_combined(c, train, soft, cfg, loss_cfg, metrics)
    return ResCLResult(c, merge(c), net_t, soft, warmed)


# -- baselines ----------------------------------------------------------------------------

def baseline_lwf(net_w: Network, task: str, train: Dataset, cfg: TrainConfig, lam_lwf: float = 1.0,
                 loss_cfg: LossConfig = LossConfig(), metrics: MetricsLog | None = None) -> Network:
    """Train the warmed-up network directly: ``lam_lwf * KL(old outputs) + CE + L2``."""
    net = net_w.copy()
    soft = compute_soft_targets(net_w, None, train.images, task, loss_cfg.temperature).source
    trainable = list(net.params)
    aug_rng = make_rng(cfg.seed, _STREAM_AUG)

    def loss_fn(idx):
        path = net.path("train", trainable)
        x = Tensor(_batch_images(train.images, idx, cfg, aug_rng, net.dtype))
        loss, parts = lwf_loss(path, net, x, train.labels[idx], {k: v[idx] for k, v in soft.items()},
                               task, lam_lwf, loss_cfg)
        return loss, _leaves(path), parts

    optimize(net.params, loss_fn, len(train), cfg.continual(), stage="lwf", metrics=metrics)
    return recompute_population_stats(net, train.images) if cfg.iterations else net


def baseline_mean_imm(net_a: Network, net_b: Network, mix: float) -> Network:
    """Elementwise ``(1 - mix) * a + mix * b`` of every parameter and BN statistic."""
    if not 0.0 <= mix <= 1.0:
        raise ValueError("mix must lie in [0, 1]")
    if spec_json(net_a.spec) != spec_json(net_b.spec) or net_a.heads != net_b.heads:
        raise ValueError("mean-IMM needs networks with identical architecture and heads")
    out = net_a.copy()
    for store_a, store_b, store_o in ((net_a.params, net_b.params, out.params),
                                      (net_a.stats, net_b.stats, out.stats)):
        for k in store_a:
            a = store_a[k].astype(np.float64)
            store_o[k] = ((1.0 - mix) * a + mix * store_b[k].astype(np.float64)).astype(net_a.dtype)
    return out


def imm_mix(ratio: float) -> float:
    """Weight of the new network for a source:target mixing ratio ``alpha_1 / alpha_2``."""
    return 1.0 / (1.0 + ratio)


def baseline_joint(net: Network, datasets: Mapping[str, Dataset], cfg: TrainConfig,
                   loss_cfg: LossConfig = LossConfig(), metrics: MetricsLog | None = None) -> Network:
    """Alternate minibatches across all tasks' training sets (needs every task's head)."""
    for task in datasets:
        net.check_task(task)
    net = net.copy()
    tasks = list(datasets)
    trainable = list(net.params)
    samplers = {t: EpochSampler(len(datasets[t]), cfg.batch_size, make_rng(cfg.seed, 10 + i))
                for i, t in enumerate(tasks)}
    counter = {"i": 0}
    aug_rng = make_rng(cfg.seed, _STREAM_AUG)

    def loss_fn(_idx):
        task = tasks[counter["i"] % len(tasks)]
        counter["i"] += 1
        ds = datasets[task]
        idx = samplers[task].next()
        path = net.path("train", trainable)
        x = Tensor(_batch_images(ds.images, idx, cfg, aug_rng, net.dtype))
        ce = kl_tempered(ds.labels[idx], net.forward(x, task, path=path), 1.0)
        leaves = _leaves(path)
        return ce + weight_decay_l2(leaves.values(), loss_cfg.lam_dec), leaves, {}

    optimize(net.params, loss_fn, 2, cfg, stage="joint", metrics=metrics)
    if not cfg.iterations:
        return net
    return recompute_population_stats(net, np.concatenate([datasets[t].images for t in tasks]))
