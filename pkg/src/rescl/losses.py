"""Training objectives: tempered KL, alpha decay, L2 weight decay, the full ResCL loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import Tensor, _check_finite, log_softmax_np


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1e-4  # alpha-decay multiplier
    lam_dec: float = 1e-4  # L2 weight decay on trainable weights
    temperature: float = 2.0
    alpha_norm: str = "l1"
    parameterization: str = "residual"
    use_source_loss: bool = True  # False only for the fine-tuning-limit diagnostic

    def __post_init__(self):
        if self.lam < 0 or self.lam_dec < 0:
            raise ValueError("decay multipliers must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.alpha_norm not in ("l1", "l2"):
            raise ValueError(f"alpha_norm must be 'l1' or 'l2', got {self.alpha_norm!r}")
        if self.parameterization not in ("residual", "naive"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")


@dataclass
class SoftTargets:
    """Cached softened outputs on the target training set.

    ``source`` maps every previously learned task to the source network's
    distributions; ``target`` holds the fine-tuned network's distributions for
    the new task.
    """

    source: dict[str, np.ndarray]
    target: np.ndarray | None
    temperature: float = 2.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = None
        for arr in list(self.source.values()) + ([self.target] if self.target is not None else []):
            if n is None:
                n = len(arr)
            elif len(arr) != n:
                raise ValueError("soft targets disagree on the number of rows")

    def __len__(self) -> int:
        if self.target is not None:
            return len(self.target)
        return len(next(iter(self.source.values())))

    def rows(self, idx: np.ndarray) -> "SoftTargets":
        return SoftTargets({k: v[idx] for k, v in self.source.items()},
                           None if self.target is None else self.target[idx], self.temperature)


def _as_distribution(target, k: int, dtype) -> np.ndarray:
    target = np.asarray(target)
    if target.ndim == 1:
        if target.dtype.kind not in "iu":
            raise TypeError("1-D targets must be integer class labels")
        p = np.zeros((len(target), k), dtype=dtype)
        p[np.arange(len(target)), target] = 1.0
        return p
    if target.shape[1] != k:
        raise ValueError(f"target has {target.shape[1]} classes, logits have {k}")
    return target.astype(dtype, copy=False)


def kl_tempered(target, logits: Tensor, T: float = 2.0) -> Tensor:
    """Batch mean of ``sum_k p log(p / q)`` with ``q = softmax(logits / T)``.

    ``target`` is an (N, K) distribution or (N,) integer labels (one-hot, where
    the loss reduces to the tempered cross-entropy).  Terms with ``p = 0``
    contribute 0.
    """
    if T <= 0:
        raise ValueError("temperature must be positive")
    z = logits.data
    if z.ndim != 2:
        raise ValueError("logits must be (N, K)")
    n, k = z.shape
    p = _as_distribution(target, k, z.dtype)
    if p.shape[0] != n:
        raise ValueError("target and logits differ in batch size")
    logq = log_softmax_np(z, T)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    loss = (plogp - p * logq).sum() / n
    _check_finite(loss, "loss")
    q = np.exp(logq)
    psum = p.sum(axis=1, keepdims=True)

    def backward(g):
        return (g * (q * psum - p) / (T * n),)

    return Tensor.from_op(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def alpha_decay(alphas: Sequence[Tensor], lam: float, norm: str = "l1") -> Tensor:
    """``lam * sum|alpha|`` (L1) or ``lam * 1/2 sum alpha^2`` (L2); subgradient 0 at 0."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    alphas = list(alphas)
    dtype = alphas[0].dtype if alphas else np.float64
    if norm == "l1":
        val = lam * sum(float(np.abs(a.data).sum()) for a in alphas)

        def backward(g):
            return tuple(g * lam * np.sign(a.data) for a in alphas)
    elif norm == "l2":
        val = lam * 0.5 * sum(float((a.data.astype(np.float64) ** 2).sum()) for a in alphas)

        def backward(g):
            return tuple(g * lam * a.data for a in alphas)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return Tensor.from_op(np.asarray(val, dtype=dtype), alphas, backward)


def weight_decay_l2(params: Sequence[Tensor], lam_dec: float) -> Tensor:
    """``1/2 * lam_dec * sum theta^2``."""
    params = list(params)
    dtype = params[0].dtype if params else np.float64
    val = 0.5 * lam_dec * sum(float((p.data.astype(np.float64) ** 2).sum()) for p in params)

    def backward(g):
        return tuple(g * lam_dec * p.data for p in params)

    return Tensor.from_op(np.asarray(val, dtype=dtype), params, backward)


def rescl_total_loss(binding, x, soft: SoftTargets, cfg: LossConfig):
    """Full combined-network objective on one batch.

    LwF term per source head + distillation term on the target head +
    alpha decay + L2 decay on the target path's trainable weights.  Returns
    the scalar loss and a dict of the individual terms (floats).
    """
    if soft is None or soft.target is None:
        raise ValueError("combined training needs cached soft targets")
    c = binding.c
    feats = binding.features(x)
    parts: dict[str, float] = {}
    terms = []
    if cfg.use_source_loss:
        for task in c.source_tasks:
            if task not in soft.source:
                raise ValueError(f"missing soft targets for source task {task!r}")
            t = kl_tempered(soft.source[task], binding.head(feats, task), cfg.temperature)
            parts[f"lwf.{task}"] = float(t.data)
            terms.append(t)
    t = kl_tempered(soft.target, binding.head(feats, c.target_task), cfg.temperature)
    parts["distill"] = float(t.data)
    terms.append(t)
    leaves = binding.leaves()
    alphas = [leaves[k] for k in c.alpha_names() if k in leaves]
    if alphas:
        d = alpha_decay(alphas, cfg.lam, cfg.alpha_norm)
        parts["alpha_decay"] = float(d.data)
        terms.append(d)
    weights = [v for k, v in leaves.items() if k.startswith("tgt.")]
    if weights:
        wd = weight_decay_l2(weights, cfg.lam_dec)
        parts["weight_decay"] = float(wd.data)
        terms.append(wd)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total, parts


def lwf_loss(path, net, x, labels: np.ndarray, soft_source: Mapping[str, np.ndarray],
             target_task: str, lam_lwf: float, cfg: LossConfig):
    """LwF objective: ``lam_lwf * KL(source soft || source heads) + CE(labels) + L2``."""
    feats = net.features(x, path=path)
    parts: dict[str, float] = {}
    total = None
    for task, probs in soft_source.items():
        t = kl_tempered(probs, path.head(feats, task), cfg.temperature)
        parts[f"lwf.{task}"] = float(t.data)
        t = t * lam_lwf
        total = t if total is None else total + t
    ce = kl_tempered(labels, path.head(feats, target_task), 1.0)
    parts["ce"] = float(ce.data)
    total = ce if total is None else total + ce
    weights = [t for t in path.leaves.values() if t.requires_grad]
    if weights:
        wd = weight_decay_l2(weights, cfg.lam_dec)
        parts["weight_decay"] = float(wd.data)
        total = total + wd
    return total, parts
