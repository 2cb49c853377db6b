"""Network building blocks and the multi-head network container.

A network is a :class:`NetworkSpec` (architecture), a parameter store and a
batch-norm statistics store, plus one linear head per task.  The NetworkSpec is
compiled into a *plan*: the trunk split into affine :class:`Segment` runs
separated by parameter-free nonlinear or reshaping ops.  Segments are the
unit at which two trunks get combined and later merged back, so the plain
forward pass, the combined forward pass and the merge all walk the same plan.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from . import tensor as tc
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
EVAL_CHUNK = 512


# -- block specs -------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1


@dataclass(frozen=True)
class Linear:
    out_features: int


@dataclass(frozen=True)
class BatchNorm:
    pass


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class AvgPool:
    """Average pooling with a ``size`` window; ``size=0`` pools globally to (N, C)."""

    size: int = 0


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class PreActUnit:
    """BN-ReLU-Conv-BN-ReLU-Conv plus identity or 1x1 projection shortcut."""

    out_channels: int
    stride: int = 1


_BLOCKS = {cls.__name__: cls for cls in (Conv, Linear, BatchNorm, ReLU, AvgPool, Flatten, PreActUnit)}


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, ...]
    blocks: tuple = ()

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "blocks": [{"type": type(b).__name__, **b.__dict__} for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkSpec":
        blocks = []
        for b in d["blocks"]:
            b = dict(b)
            blocks.append(_BLOCKS[b.pop("type")](**b))
        return cls(tuple(d["input_shape"]), tuple(blocks))


def preact_resnet(input_shape=(3, 8, 8), widths=(8, 16), pool_between: bool = True,
                  stem_pool: bool = False) -> NetworkSpec:
    """Small pre-activation residual net: stem conv, one unit per width, BN-ReLU-GAP."""
    blocks: list = [Conv(widths[0], 3, 1, 1)]
    if stem_pool:
        blocks.append(AvgPool(2))
    for i, wdt in enumerate(widths):
        if i and pool_between:
            blocks.append(AvgPool(2))
        blocks.append(PreActUnit(wdt))
    blocks += [BatchNorm(), ReLU(), AvgPool(0)]
    return NetworkSpec(tuple(input_shape), tuple(blocks))


# -- plan ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class Op:
    kind: str  # "conv" | "linear" | "bn"
    name: str
    in_ch: int
    out_ch: int
    layer: object = None
    bias: bool = True


@dataclass(frozen=True)
class Segment:
    """Maximal run of affine ops on one path: BNs around at most one conv/linear."""

    index: int
    ops: tuple[Op, ...]

    @property
    def channels(self) -> int:
        return self.ops[-1].out_ch

    @property
    def weight_op(self) -> Op | None:
        for op in self.ops:
            if op.kind != "bn":
                return op
        return None


@dataclass(frozen=True)
class Shared:
    layer: object


@dataclass(frozen=True)
class Residual:
    body: tuple
    shortcut: Segment | None


@dataclass
class Plan:
    nodes: tuple
    segments: list[Segment]
    param_shapes: dict[str, tuple[int, ...]]
    stat_shapes: dict[str, tuple[int, ...]]
    feature_dim: int
    bn_names: list[str] = field(default_factory=list)


class _Builder:
    def __init__(self):
        self.segments: list[Segment] = []
        self.params: dict[str, tuple[int, ...]] = {}
        self.stats: dict[str, tuple[int, ...]] = {}
        self.bn_names: list[str] = []

    def segment(self, ops: list[Op]) -> Segment:
        # a weight layer feeding a BN in its own segment has no bias: BN would cancel it
        fixed = []
        for i, op in enumerate(ops):
            if op.kind != "bn":
                has_bn_after = any(o.kind == "bn" for o in ops[i + 1:])
                op = Op(op.kind, op.name, op.in_ch, op.out_ch, op.layer, not has_bn_after)
            fixed.append(op)
        for op in fixed:
            if op.kind == "bn":
                self.params[f"{op.name}.gamma"] = (op.out_ch,)
                self.params[f"{op.name}.beta"] = (op.out_ch,)
                self.stats[f"{op.name}.running_mean"] = (op.out_ch,)
                self.stats[f"{op.name}.running_var"] = (op.out_ch,)
                self.bn_names.append(op.name)
            elif op.kind == "conv":
                k = op.layer.kernel
                self.params[f"{op.name}.weight"] = (op.out_ch, op.in_ch, k, k)
                if op.bias:
                    self.params[f"{op.name}.bias"] = (op.out_ch,)
            else:
                self.params[f"{op.name}.weight"] = (op.out_ch, op.in_ch)
                if op.bias:
                    self.params[f"{op.name}.bias"] = (op.out_ch,)
        seg = Segment(len(self.segments), tuple(fixed))
        self.segments.append(seg)
        return seg


def _conv_shape(shape, conv: Conv):
    if len(shape) != 3:
        raise ValueError("Conv needs a (C, H, W) input")
    c, h, w = shape
    return (
        conv.out_channels,
        tc.conv_output_size(h, conv.kernel, conv.stride, conv.pad),
        tc.conv_output_size(w, conv.kernel, conv.stride, conv.pad),
    )


def compile_plan(spec: NetworkSpec) -> Plan:
    b = _Builder()
    shape = tuple(spec.input_shape)
    nodes: list = []
    cur: list[Op] = []

    def flush():
        nonlocal cur
        if cur:
            nodes.append(b.segment(cur))
            cur = []

    for i, blk in enumerate(spec.blocks):
        name = f"trunk.{i}"
        if isinstance(blk, (Conv, Linear)):
            has_weight = any(op.kind != "bn" for op in cur)
            has_bn = any(op.kind == "bn" for op in cur)
            padded = isinstance(blk, Conv) and blk.pad > 0
            if has_weight or (has_bn and padded):
                flush()
            if isinstance(blk, Conv):
                new = _conv_shape(shape, blk)
                cur.append(Op("conv", name, shape[0], blk.out_channels, blk))
            else:
                if len(shape) != 1:
                    raise ValueError("Linear needs a flat input; insert Flatten or global AvgPool")
                new = (blk.out_features,)
                cur.append(Op("linear", name, shape[0], blk.out_features, blk))
            shape = new
        elif isinstance(blk, BatchNorm):
            cur.append(Op("bn", name, shape[0], shape[0], blk))
        elif isinstance(blk, (ReLU, AvgPool, Flatten)):
            flush()
            if isinstance(blk, AvgPool):
                if len(shape) != 3:
                    raise ValueError("AvgPool needs a (C, H, W) input")
                if blk.size == 0:
                    shape = (shape[0],)
                else:
                    if shape[1] % blk.size or shape[2] % blk.size:
                        raise ValueError("AvgPool size must divide the spatial dims")
                    shape = (shape[0], shape[1] // blk.size, shape[2] // blk.size)
            elif isinstance(blk, Flatten):
                shape = (int(np.prod(shape)),)
            nodes.append(Shared(blk))
        elif isinstance(blk, PreActUnit):
            flush()
            if len(shape) != 3:
                raise ValueError("PreActUnit needs a (C, H, W) input")
            cin, out = shape[0], blk.out_channels
            c1 = Conv(out, 3, blk.stride, 1)
            mid = _conv_shape(shape, c1)
            c2 = Conv(out, 3, 1, 1)
            _conv_shape(mid, c2)
            body = (
                b.segment([Op("bn", f"{name}.bn1", cin, cin, BatchNorm())]),
                Shared(ReLU()),
                b.segment([Op("conv", f"{name}.conv1", cin, out, c1),
                           Op("bn", f"{name}.bn2", out, out, BatchNorm())]),
                Shared(ReLU()),
                b.segment([Op("conv", f"{name}.conv2", out, out, c2)]),
            )
            shortcut = None
            if blk.stride != 1 or cin != out:
                pc = Conv(out, 1, blk.stride, 0)
                if _conv_shape(shape, pc) != mid:
                    raise ValueError("projection shortcut shape mismatch")
                shortcut = b.segment([Op("conv", f"{name}.proj", cin, out, pc)])
            nodes.append(Residual(body, shortcut))
            shape = mid
        else:
            raise TypeError(f"unknown block {blk!r}")
    flush()
    if len(shape) != 1:
        raise ValueError("trunk must end in a flat feature vector (use AvgPool(0) or Flatten)")
    return Plan(tuple(nodes), b.segments, b.params, b.stats, shape[0], b.bn_names)


# -- plan execution ----------------------------------------------------------------------

def apply_shared(layer, x: Tensor) -> Tensor:
    if isinstance(layer, ReLU):
        return tc.relu(x)
    if isinstance(layer, Flatten):
        return tc.flatten(x)
    if layer.size == 0:
        return tc.global_avg_pool(x)
    return tc.avg_pool2d(x, layer.size)


def run_nodes(nodes, x: Tensor, seg_fn: Callable[[Segment, Tensor], Tensor]) -> Tensor:
    for node in nodes:
        if isinstance(node, Segment):
            x = seg_fn(node, x)
        elif isinstance(node, Shared):
            x = apply_shared(node.layer, x)
        else:
            body = run_nodes(node.body, x, seg_fn)
            sc = seg_fn(node.shortcut, x) if node.shortcut is not None else x
            x = body + sc
    return x


class StatsCollector:
    """Pools per-channel mean/variance over several batches (Chan's update)."""

    def __init__(self):
        self.acc: dict[str, tuple[int, np.ndarray, np.ndarray]] = {}

    def add(self, name: str, count: int, mu: np.ndarray, var: np.ndarray) -> None:
        mu = mu.astype(np.float64)
        m2 = var.astype(np.float64) * count
        if name not in self.acc:
            self.acc[name] = (count, mu, m2)
            return
        n0, mu0, m20 = self.acc[name]
        n = n0 + count
        delta = mu - mu0
        self.acc[name] = (n, mu0 + delta * (count / n), m20 + m2 + delta * delta * (n0 * count / n))

    def result(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        n, mu, m2 = self.acc[name]
        return mu, m2 / n


class Path:
    """One trunk's parameters plus its batch-norm behaviour.

    ``mode`` is "inference" (population statistics), "train" (minibatch
    statistics with running-average update) or "collect" (minibatch
    statistics, moments handed to a :class:`StatsCollector`).
    """

    def __init__(self, params: Mapping[str, np.ndarray], stats: Mapping[str, np.ndarray],
                 mode: str = "inference", trainable: Iterable[str] = (),
                 collector: StatsCollector | None = None, update_stats: bool = True):
        if mode not in ("inference", "train", "collect"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "collect" and collector is None:
            raise ValueError("collect mode needs a StatsCollector")
        self.params = params
        self.stats = stats
        self.mode = mode
        self.trainable = set(trainable)
        self.collector = collector
        self.update_stats = update_stats
        self.leaves: dict[str, Tensor] = {}

    def tensor(self, name: str) -> Tensor:
        t = self.leaves.get(name)
        if t is None:
            t = Tensor(self.params[name], requires_grad=name in self.trainable)
            self.leaves[name] = t
        return t

    def bn(self, x: Tensor, name: str) -> Tensor:
        gamma = self.tensor(f"{name}.gamma")
        beta = self.tensor(f"{name}.beta")
        if self.mode == "inference":
            inv = 1.0 / np.sqrt(self.stats[f"{name}.running_var"] + BN_EPS)
            mu = self.stats[f"{name}.running_mean"]
            if gamma.requires_grad or beta.requires_grad:
                scale = gamma * inv.astype(gamma.dtype)
                shift = beta - scale * mu.astype(gamma.dtype)
            else:
                s = gamma.data * inv
                scale = Tensor(s.astype(gamma.dtype))
                shift = Tensor((beta.data - s * mu).astype(gamma.dtype))
            return tc.channel_affine(x, scale, shift)
        y, mu, var = tc.batch_norm_train(x, gamma, beta, BN_EPS)
        if self.mode == "collect":
            self.collector.add(name, x.size // x.shape[1], mu, var)
        elif self.update_stats:
            rm, rv = self.stats[f"{name}.running_mean"], self.stats[f"{name}.running_var"]
            rm *= 1.0 - BN_MOMENTUM
            rm += BN_MOMENTUM * mu
            rv *= 1.0 - BN_MOMENTUM
            rv += BN_MOMENTUM * var
        return y

    def op(self, op: Op, x: Tensor) -> Tensor:
        if op.kind == "bn":
            return self.bn(x, op.name)
        w = self.tensor(f"{op.name}.weight")
        b = self.tensor(f"{op.name}.bias") if op.bias else None
        if op.kind == "conv":
            return tc.conv2d(x, w, b, op.layer.stride, op.layer.pad)
        return tc.linear(x, w, b)

    def segment(self, seg: Segment, x: Tensor) -> Tensor:
        for op in seg.ops:
            x = self.op(op, x)
        return x

    def head(self, feats: Tensor, task: str) -> Tensor:
        return tc.linear(feats, self.tensor(f"head.{task}.weight"), self.tensor(f"head.{task}.bias"))


# -- standalone layer values (folding, tests) --------------------------------------------

@dataclass
class LinearLayer:
    weight: np.ndarray  # (C_o, C_i)
    bias: np.ndarray


@dataclass
class ConvLayer:
    weight: np.ndarray  # (C_o, C_i, H_k, W_k)
    bias: np.ndarray
    stride: int = 1
    pad: int = 0


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = BN_EPS

    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        """Inference-mode ``(scale, shift)`` so that ``y = scale * x + shift``."""
        denom = np.asarray(self.var, np.float64) + self.eps
        if np.any(denom <= 0):
            raise ValueError("batch norm variance + eps must be positive to fold")
        scale = np.asarray(self.gamma, np.float64) / np.sqrt(denom)
        return scale, np.asarray(self.beta, np.float64) - np.asarray(self.mean, np.float64) * scale


# -- network container -------------------------------------------------------------------

def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Network:
    """Trunk described by ``spec`` plus one linear head per registered task."""

    def __init__(self, spec: NetworkSpec, params: dict[str, np.ndarray],
                 stats: dict[str, np.ndarray], heads: dict[str, int], dtype=np.float32):
        self.spec = spec
        self.params = params
        self.stats = stats
        self.heads = dict(heads)
        self.dtype = np.dtype(dtype)
        self._plan: Plan | None = None

    @property
    def plan(self) -> Plan:
        if self._plan is None:
            self._plan = compile_plan(self.spec)
        return self._plan

    @classmethod
    def init(cls, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32) -> "Network":
        plan = compile_plan(spec)
        params: dict[str, np.ndarray] = {}
        for name, shape in plan.param_shapes.items():
            if name.endswith(".weight"):
                params[name] = he_normal(rng, shape, int(np.prod(shape[1:])), dtype)
            elif name.endswith(".gamma"):
                params[name] = np.ones(shape, dtype)
            else:
                params[name] = np.zeros(shape, dtype)
        stats = {}
        for name, shape in plan.stat_shapes.items():
            stats[name] = np.ones(shape, dtype) if name.endswith("running_var") else np.zeros(shape, dtype)
        net = cls(spec, params, stats, {}, dtype)
        net._plan = plan
        return net

    def copy(self) -> "Network":
        net = Network(self.spec, {k: v.copy() for k, v in self.params.items()},
                      {k: v.copy() for k, v in self.stats.items()}, self.heads, self.dtype)
        net._plan = self._plan
        return net

    def astype(self, dtype) -> "Network":
        net = Network(self.spec, {k: v.astype(dtype) for k, v in self.params.items()},
                      {k: v.astype(dtype) for k, v in self.stats.items()}, self.heads, dtype)
        net._plan = self._plan
        return net

    def add_head(self, task: str, n_classes: int, rng: np.random.Generator) -> "Network":
        if task in self.heads:
            raise ValueError(f"task {task!r} already has a head")
        net = self.copy()
        d = self.plan.feature_dim
        net.params[f"head.{task}.weight"] = he_normal(rng, (n_classes, d), d, self.dtype)
        net.params[f"head.{task}.bias"] = np.zeros(n_classes, self.dtype)
        net.heads[task] = n_classes
        return net

    def trunk_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("trunk.")]

    def head_names(self, task: str) -> list[str]:
        return [f"head.{task}.weight", f"head.{task}.bias"]

    def trunk_param_count(self) -> int:
        return int(sum(self.params[k].size for k in self.trunk_names()))

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def path(self, mode: str = "inference", trainable: Iterable[str] = (), **kw) -> Path:
        return Path(self.params, self.stats, mode, trainable, **kw)

    def check_task(self, task: str) -> None:
        if task not in self.heads:
            raise KeyError(f"unknown task {task!r}; registered: {sorted(self.heads)}")

    def features(self, x, mode: str = "inference", path: Path | None = None) -> Tensor:
        path = path or self.path(mode)
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, self.dtype))
        return run_nodes(self.plan.nodes, x, path.segment)

    def forward(self, x, task: str, mode: str = "inference", path: Path | None = None) -> Tensor:
        self.check_task(task)
        path = path or self.path(mode)
        return path.head(self.features(x, mode, path), task)

    def predict_logits(self, images: np.ndarray, task: str) -> np.ndarray:
        """Inference-mode logits, evaluated in fixed-size chunks."""
        self.check_task(task)
        out = []
        with tc.no_grad():
            for i in range(0, len(images), EVAL_CHUNK):
                out.append(self.forward(images[i:i + EVAL_CHUNK].astype(self.dtype), task).data)
        return np.concatenate(out, axis=0)

    def state_dict(self) -> dict[str, np.ndarray]:
        d = dict(self.params)
        d.update(self.stats)
        return d

    def checksum(self) -> str:
        return state_checksum(self.state_dict())


def state_checksum(arrays: Mapping[str, np.ndarray]) -> str:
    import hashlib

    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()


def batchnorm_forward(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                      running_var: np.ndarray, mode: str = "inference", eps: float = BN_EPS,
                      momentum: float = BN_MOMENTUM) -> Tensor:
    """Standalone batch norm; train mode updates the running arrays in place."""
    if running_mean.shape != (x.shape[1],):
        raise ValueError("batch norm statistics do not match the channel count")
    if mode == "inference":
        inv = 1.0 / np.sqrt(running_var + eps)
        scale = gamma * inv.astype(gamma.dtype)
        return tc.channel_affine(x, scale, beta - scale * running_mean.astype(gamma.dtype))
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    y, mu, var = tc.batch_norm_train(x, gamma, beta, eps)
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var
    return y


def _batches(n: int, batch_size: int | None):
    if batch_size is None or batch_size >= n:
        yield 0, n
        return
    for i in range(0, n, batch_size):
        # fold a trailing single sample into the previous batch
        j = min(i + batch_size, n)
        if n - j == 1:
            j = n
        yield i, j
        if j == n:
            return


def recompute_population_stats(net: Network, images: np.ndarray,
                               batch_size: int | None = None) -> Network:
    """Set every BN's population statistics from exact moments over ``images``.

    Upstream layers normalize with minibatch statistics during the pass; with
    the default ``batch_size=None`` the whole dataset is one batch, so those
    coincide with the final population statistics.
    """
    if len(images) == 0:
        raise ValueError("cannot recompute statistics on an empty dataset")
    col = StatsCollector()
    with tc.no_grad():
        for i, j in _batches(len(images), batch_size):
            path = net.path("collect", collector=col)
            net.features(images[i:j].astype(net.dtype), path=path)
    out = net.copy()
    for name in net.plan.bn_names:
        mu, var = col.result(name)
        out.stats[f"{name}.running_mean"] = mu.astype(net.dtype)
        out.stats[f"{name}.running_var"] = var.astype(net.dtype)
    return out


# -- serialization -----------------------------------------------------------------------

def network_meta(net: Network) -> dict:
    return {"kind": "network", "spec": net.spec.to_dict(), "heads": net.heads,
            "dtype": net.dtype.name}


def network_to_tensors(net: Network, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v for k, v in net.state_dict().items()}


def network_from_tensors(meta: Mapping, tensors: Mapping[str, np.ndarray], prefix: str = "") -> Network:
    spec = NetworkSpec.from_dict(meta["spec"])
    dtype = np.dtype(meta.get("dtype", "float32"))
    plan = compile_plan(spec)
    params, stats = {}, {}
    for name, arr in tensors.items():
        if not name.startswith(prefix):
            continue
        key = name[len(prefix):]
        if key in plan.stat_shapes:
            stats[key] = np.array(arr, dtype=dtype)
        elif key in plan.param_shapes or key.startswith("head."):
            params[key] = np.array(arr, dtype=dtype)
    missing = (set(plan.param_shapes) - set(params)) | (set(plan.stat_shapes) - set(stats))
    if missing:
        raise ValueError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    net = Network(spec, params, stats, {k: int(v) for k, v in meta["heads"].items()}, dtype)
    net._plan = plan
    return net


def save_network(path, net: Network) -> None:
    from .checkpoint import write_checkpoint, meta_tensor

    tensors = {"meta.json": meta_tensor(network_meta(net))}
    tensors.update(network_to_tensors(net))
    write_checkpoint(path, tensors)


def load_network(path) -> Network:
    from .checkpoint import read_checkpoint, read_meta

    tensors = read_checkpoint(path)
    meta = read_meta(tensors)
    if meta.get("kind") != "network":
        raise ValueError(f"{path} holds a {meta.get('kind')!r} checkpoint, not a network")
    return network_from_tensors(meta, tensors)


def spec_json(spec: NetworkSpec) -> str:
    return json.dumps(spec.to_dict(), sort_keys=True)
