"""Combining a frozen source trunk with a trainable target trunk, and merging back.

Every affine segment of the plan gets one combination layer::

    out = (1 + alpha_s) * y_s + alpha_t * y_t        (residual parameterization)
    out = alpha_s * y_s + alpha_t * y_t              (naive parameterization)

with per-output-channel ``alpha`` broadcast over batch and spatial axes.
Both paths read the same combined input, so after training each segment
folds (BN included) into a single layer of the original shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor as tc
from .checkpoint import meta_tensor, read_checkpoint, read_meta, write_checkpoint
from .layers import (
    BN_EPS,
    BatchNormLayer,
    ConvLayer,
    LinearLayer,
    EVAL_CHUNK,
    Network,
    NetworkSpec,
    Path,
    Segment,
    StatsCollector,
    _batches,
    network_from_tensors,
    network_to_tensors,
    run_nodes,
    spec_json,
)
from .tensor import Tensor

PARAMETERIZATIONS = ("residual", "naive")


@dataclass
class CombinationParams:
    alpha_s: np.ndarray
    alpha_t: np.ndarray


def combine_outputs(y_s: Tensor, y_t: Tensor, alpha_s: Tensor, alpha_t: Tensor,
                    offset: float = 1.0) -> Tensor:
    """``(offset + alpha_s) * y_s + alpha_t * y_t`` per channel (axis 1)."""
    if y_s.shape != y_t.shape:
        raise ValueError(f"cannot combine outputs of shapes {y_s.shape} and {y_t.shape}")
    c = y_s.shape[1]
    if alpha_s.shape != (c,) or alpha_t.shape != (c,):
        raise ValueError(f"combination parameters must have length {c}")
    view = (1, c) + (1,) * (y_s.ndim - 2)
    cs = (offset + alpha_s.data).reshape(view)
    ct = alpha_t.data.reshape(view)
    ysd, ytd = y_s.data, y_t.data

    def backward(g):
        return (
            g * cs if y_s.requires_grad else None,
            g * ct if y_t.requires_grad else None,
            tc.channel_dot(g, ysd) if alpha_s.requires_grad else None,
            tc.channel_dot(g, ytd) if alpha_t.requires_grad else None,
        )

    return Tensor.from_op(cs * ysd + ct * ytd, (y_s, y_t, alpha_s, alpha_t), backward)


def alpha_name(index: int, which: str) -> str:
    return f"comb.{index}.alpha_{which}"


class CombinedNetwork:
    """Frozen source network, trainable target network and one alpha pair per segment.

    Heads of ``source`` (all previously learned tasks) stay frozen; the head of
    ``target_task`` comes from ``target`` and is trained without alphas.
    """

    def __init__(self, source: Network, target: Network, alphas: list[CombinationParams],
                 target_task: str, parameterization: str = "residual", stats_final: bool = True):
        if parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"unknown parameterization {parameterization!r}")
        self.source = source
        self.target = target
        self.alphas = alphas
        self.target_task = target_task
        self.parameterization = parameterization
        self.stats_final = stats_final

    @property
    def plan(self):
        return self.source.plan

    @property
    def offset(self) -> float:
        return 1.0 if self.parameterization == "residual" else 0.0

    @property
    def source_tasks(self) -> list[str]:
        return [t for t in self.source.heads if t != self.target_task]

    @property
    def tasks(self) -> list[str]:
        return self.source_tasks + [self.target_task]

    @property
    def dtype(self):
        return self.target.dtype

    # -- parameter store seen by the optimizer ----------------------------------------
    def param_store(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name: target trunk, target head, all alphas."""
        store = {f"tgt.{k}": self.target.params[k] for k in self.target.trunk_names()}
        for k in self.target.head_names(self.target_task):
            store[f"tgt.{k}"] = self.target.params[k]
        for i, p in enumerate(self.alphas):
            store[alpha_name(i, "s")] = p.alpha_s
            store[alpha_name(i, "t")] = p.alpha_t
        return store

    def alpha_names(self) -> list[str]:
        return [alpha_name(i, w) for i in range(len(self.alphas)) for w in "st"]

    def check_task(self, task: str) -> None:
        if task not in self.tasks:
            raise KeyError(f"unknown task {task!r}; registered: {self.tasks}")

    # -- evaluation ---------------------------------------------------------------------
    def bind(self, mode: str = "inference", trainable: Iterable[str] = (), **kw) -> "CombinedBinding":
        return CombinedBinding(self, mode, set(trainable), **kw)

    def features(self, x, mode: str = "inference", binding: "CombinedBinding | None" = None) -> Tensor:
        binding = binding or self.bind(mode)
        return binding.features(x)

    def forward(self, x, task: str, mode: str = "inference") -> Tensor:
        self.check_task(task)
        b = self.bind(mode)
        return b.head(b.features(x), task)

    def predict_logits(self, images: np.ndarray, task: str) -> np.ndarray:
        self.check_task(task)
        out = []
        with tc.no_grad():
            for i in range(0, len(images), EVAL_CHUNK):
                out.append(self.forward(images[i:i + EVAL_CHUNK].astype(self.dtype), task).data)
        return np.concatenate(out, axis=0)

    def copy(self) -> "CombinedNetwork":
        return CombinedNetwork(
            self.source, self.target.copy(),
            [CombinationParams(p.alpha_s.copy(), p.alpha_t.copy()) for p in self.alphas],
            self.target_task, self.parameterization, self.stats_final,
        )


class CombinedBinding:
    """Tensors for one forward pass of a combined network."""

    def __init__(self, c: CombinedNetwork, mode: str, trainable: set[str],
                 collector: StatsCollector | None = None, update_stats: bool = True):
        self.c = c
        self.src = c.source.path("inference")
        tgt_trainable = {k[4:] for k in trainable if k.startswith("tgt.")}
        self.tgt = c.target.path(mode, tgt_trainable, collector=collector, update_stats=update_stats)
        self.alpha = [
            (Tensor(p.alpha_s, requires_grad=alpha_name(i, "s") in trainable),
             Tensor(p.alpha_t, requires_grad=alpha_name(i, "t") in trainable))
            for i, p in enumerate(c.alphas)
        ]

    def segment(self, seg: Segment, x: Tensor) -> Tensor:
        a_s, a_t = self.alpha[seg.index]
        return combine_outputs(self.src.segment(seg, x), self.tgt.segment(seg, x), a_s, a_t,
                               self.c.offset)

    def features(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, self.c.dtype))
        return run_nodes(self.c.plan.nodes, x, self.segment)

    def head(self, feats: Tensor, task: str) -> Tensor:
        if task == self.c.target_task:
            return self.tgt.head(feats, task)
        return self.src.head(feats, task)

    def leaves(self) -> dict[str, Tensor]:
        out = {f"tgt.{k}": t for k, t in self.tgt.leaves.items() if t.requires_grad}
        for i, (a_s, a_t) in enumerate(self.alpha):
            if a_s.requires_grad:
                out[alpha_name(i, "s")] = a_s
            if a_t.requires_grad:
                out[alpha_name(i, "t")] = a_t
        return out


def build_combined(net_s: Network, net_t: Network, target_task: str,
                   parameterization: str = "residual", alpha_init: tuple[float, float] | None = None
                   ) -> CombinedNetwork:
    """Pair a source network with its fine-tuned copy.

    Alphas start at (-1/2, 1/2) for the residual form, which makes every
    combined segment the plain average of the two paths; for the naive form
    the same average is (1/2, 1/2).
    """
    if spec_json(net_s.spec) != spec_json(net_t.spec):
        raise ValueError("source and target networks have different architectures")
    if net_s.dtype != net_t.dtype:
        raise ValueError("source and target networks have different dtypes")
    if target_task not in net_t.heads:
        raise KeyError(f"target network has no head for task {target_task!r}")
    if alpha_init is None:
        alpha_init = (-0.5, 0.5) if parameterization == "residual" else (0.5, 0.5)
    dt = net_t.dtype
    alphas = [
        CombinationParams(np.full(seg.channels, alpha_init[0], dt), np.full(seg.channels, alpha_init[1], dt))
        for seg in net_s.plan.segments
    ]
    return CombinedNetwork(net_s.copy(), net_t.copy(), alphas, target_task, parameterization)


def recompute_target_stats(c: CombinedNetwork, images: np.ndarray,
                           batch_size: int | None = None) -> CombinedNetwork:
    """Population statistics of the target path's BNs on ``images``; source BNs untouched."""
    if len(images) == 0:
        raise ValueError("cannot recompute statistics on an empty dataset")
    col = StatsCollector()
    with tc.no_grad():
        for i, j in _batches(len(images), batch_size):
            c.bind("collect", collector=col).features(images[i:j].astype(c.dtype))
    out = c.copy()
    for name in c.plan.bn_names:
        mu, var = col.result(name)
        out.target.stats[f"{name}.running_mean"] = mu.astype(c.dtype)
        out.target.stats[f"{name}.running_var"] = var.astype(c.dtype)
    out.stats_final = True
    return out


# -- folding ------------------------------------------------------------------------------

def fold_bn_into_conv(conv, bn: BatchNormLayer, order: str = "conv_then_bn"):
    """Fold an inference-mode BN into an adjacent conv or linear layer.

    ``conv_then_bn`` rescales output channels; ``bn_then_conv`` rescales the
    kernel's input channels and pushes the BN shift through the kernel into
    the bias, which is exact only without zero padding.
    """
    scale, shift = bn.affine()
    w = np.asarray(conv.weight, np.float64)
    b = np.zeros(w.shape[0]) if conv.bias is None else np.asarray(conv.bias, np.float64)
    extra = (1,) * (w.ndim - 2)
    if order == "conv_then_bn":
        if scale.shape[0] != w.shape[0]:
            raise ValueError("BN channels do not match the layer's outputs")
        w2 = w * scale.reshape((-1, 1) + extra)
        b2 = b * scale + shift
    elif order == "bn_then_conv":
        if scale.shape[0] != w.shape[1]:
            raise ValueError("BN channels do not match the layer's inputs")
        if getattr(conv, "pad", 0):
            raise ValueError("cannot fold a BN into the input side of a zero-padded conv")
        w2 = w * scale.reshape((1, -1) + extra)
        b2 = b + (w * shift.reshape((1, -1) + extra)).reshape(w.shape[0], w.shape[1], -1).sum(axis=(1, 2))
    else:
        raise ValueError(f"unknown order {order!r}")
    if isinstance(conv, ConvLayer):
        return ConvLayer(w2, b2, conv.stride, conv.pad)
    return LinearLayer(w2, b2)


def _bn_layer(net: Network, name: str) -> BatchNormLayer:
    return BatchNormLayer(net.params[f"{name}.gamma"], net.params[f"{name}.beta"],
                          net.stats[f"{name}.running_mean"], net.stats[f"{name}.running_var"], BN_EPS)


def fold_segment(net: Network, seg: Segment):
    """Collapse one path's segment into ``("affine", scale, shift)`` or ``("layer", W, b)``."""
    wop = seg.weight_op
    if wop is None:
        scale = np.ones(seg.channels)
        shift = np.zeros(seg.channels)
        for op in seg.ops:
            s, t = _bn_layer(net, op.name).affine()
            scale, shift = s * scale, s * shift + t
        return ("affine", scale, shift)
    w = net.params[f"{wop.name}.weight"]
    b = net.params[f"{wop.name}.bias"] if wop.bias else None
    layer = ConvLayer(w, b, wop.layer.stride, wop.layer.pad) if wop.kind == "conv" else LinearLayer(w, b)
    k = seg.ops.index(wop)
    for op in reversed(seg.ops[:k]):
        layer = fold_bn_into_conv(layer, _bn_layer(net, op.name), "bn_then_conv")
    for op in seg.ops[k + 1:]:
        layer = fold_bn_into_conv(layer, _bn_layer(net, op.name), "conv_then_bn")
    return ("layer", np.asarray(layer.weight, np.float64), np.asarray(layer.bias, np.float64))


def _write_bn(params, stats, name, scale, shift, dtype):
    # population stats (0, 1) turn the BN into the exact affine scale*x + shift
    params[f"{name}.gamma"] = (scale * np.sqrt(1.0 + BN_EPS)).astype(dtype)
    params[f"{name}.beta"] = np.asarray(shift).astype(dtype)
    stats[f"{name}.running_mean"] = np.zeros_like(scale, dtype=dtype)
    stats[f"{name}.running_var"] = np.ones_like(scale, dtype=dtype)


def merge(c: CombinedNetwork) -> Network:
    """Single network with the source architecture, equal to ``c`` in inference mode."""
    if not c.stats_final:
        raise RuntimeError("target-path BN statistics are not finalized; recompute them before merging")
    dt = c.dtype
    params: dict[str, np.ndarray] = {}
    stats: dict[str, np.ndarray] = {}
    for seg in c.plan.segments:
        p = c.alphas[seg.index]
        cs = c.offset + np.asarray(p.alpha_s, np.float64)
        ct = np.asarray(p.alpha_t, np.float64)
        fs = fold_segment(c.source, seg)
        ft = fold_segment(c.target, seg)
        for arr in fs[1:] + ft[1:]:
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values while folding segment {seg.index}")
        if fs[0] == "affine":
            scale = cs * fs[1] + ct * ft[1]
            shift = cs * fs[2] + ct * ft[2]
            first = True
            for op in seg.ops:
                if first:
                    _write_bn(params, stats, op.name, scale, shift, dt)
                    first = False
                else:
                    _write_bn(params, stats, op.name, np.ones_like(scale), np.zeros_like(shift), dt)
            continue
        view = (-1,) + (1,) * (fs[1].ndim - 1)
        w = cs.reshape(view) * fs[1] + ct.reshape(view) * ft[1]
        b = cs * fs[2] + ct * ft[2]
        wop = seg.weight_op
        params[f"{wop.name}.weight"] = w.astype(dt)
        if wop.bias:
            params[f"{wop.name}.bias"] = b.astype(dt)
        k = seg.ops.index(wop)
        bias_placed = wop.bias
        for i, op in enumerate(seg.ops):
            if op is wop:
                continue
            n = op.out_ch
            if i > k and not bias_placed:
                _write_bn(params, stats, op.name, np.ones(n), b, dt)
                bias_placed = True
            else:
                _write_bn(params, stats, op.name, np.ones(n), np.zeros(n), dt)
    heads = {}
    for task in c.source_tasks:
        for k in c.source.head_names(task):
            params[k] = c.source.params[k].copy()
        heads[task] = c.source.heads[task]
    for k in c.target.head_names(c.target_task):
        params[k] = c.target.params[k].copy()
    heads[c.target_task] = c.target.heads[c.target_task]
    out = Network(c.source.spec, params, stats, heads, dt)
    out._plan = c.source._plan
    return out


# -- analysis -----------------------------------------------------------------------------

@dataclass(frozen=True)
class AlphaRow:
    depth: int
    channels: int
    mean_abs_s: float
    mean_abs_t: float
    mean_abs: float


def alpha_stats(c: CombinedNetwork) -> list[AlphaRow]:
    """Mean |alpha| per combination layer, shallowest first."""
    rows = []
    for i, p in enumerate(c.alphas):
        a_s = np.abs(np.asarray(p.alpha_s, np.float64))
        a_t = np.abs(np.asarray(p.alpha_t, np.float64))
        rows.append(AlphaRow(i, a_s.size, float(a_s.mean()), float(a_t.mean()),
                             float(np.concatenate([a_s, a_t]).mean())))
    return rows


def mean_abs_alpha(c: CombinedNetwork) -> float:
    allv = np.concatenate([np.abs(np.concatenate([p.alpha_s, p.alpha_t])) for p in c.alphas])
    return float(allv.astype(np.float64).mean())


def bn_stats_dump(net: Network) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """(layer, mu, sigma) for every BN in plan order."""
    return [
        (name, net.stats[f"{name}.running_mean"].astype(np.float64),
         np.sqrt(net.stats[f"{name}.running_var"].astype(np.float64)))
        for name in net.plan.bn_names
    ]


# -- serialization -----------------------------------------------------------------------

def save_combined(path, c: CombinedNetwork) -> None:
    meta = {
        "kind": "combined",
        "spec": c.source.spec.to_dict(),
        "source_heads": c.source.heads,
        "target_heads": c.target.heads,
        "target_task": c.target_task,
        "parameterization": c.parameterization,
        "stats_final": c.stats_final,
        "dtype": c.dtype.name,
    }
    tensors = {"meta.json": meta_tensor(meta)}
    tensors.update(network_to_tensors(c.source, "src."))
    tensors.update(network_to_tensors(c.target, "tgt."))
    for i, p in enumerate(c.alphas):
        tensors[alpha_name(i, "s")] = p.alpha_s
        tensors[alpha_name(i, "t")] = p.alpha_t
    write_checkpoint(path, tensors)


def combined_from_tensors(meta, tensors) -> CombinedNetwork:
    base = {"spec": meta["spec"], "dtype": meta["dtype"]}
    src = network_from_tensors({**base, "heads": meta["source_heads"]}, tensors, "src.")
    tgt = network_from_tensors({**base, "heads": meta["target_heads"]}, tensors, "tgt.")
    n = len(src.plan.segments)
    alphas = [CombinationParams(tensors[alpha_name(i, "s")].astype(src.dtype),
                                tensors[alpha_name(i, "t")].astype(src.dtype)) for i in range(n)]
    return CombinedNetwork(src, tgt, alphas, meta["target_task"], meta["parameterization"],
                           bool(meta["stats_final"]))


def load_combined(path) -> CombinedNetwork:
    tensors = read_checkpoint(path)
    meta = read_meta(tensors)
    if meta.get("kind") != "combined":
        raise ValueError(f"{path} holds a {meta.get('kind')!r} checkpoint, not a combined network")
    return combined_from_tensors(meta, tensors)


def load_any(path):
    """Load a plain or combined network checkpoint."""
    tensors = read_checkpoint(path)
    meta = read_meta(tensors)
    if meta.get("kind") == "combined":
        return combined_from_tensors(meta, tensors)
    return network_from_tensors(meta, tensors)
