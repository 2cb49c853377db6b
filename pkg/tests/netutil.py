"""Shared builders for tests: random architectures, randomized networks, combined nets."""

from __future__ import annotations

import numpy as np

from rescl import tensor as tc
from rescl.combine import alpha_name, build_combined
from rescl.layers import (
    AvgPool,
    BatchNorm,
    Conv,
    Flatten,
    Linear,
    Network,
    NetworkSpec,
    PreActUnit,
    ReLU,
)
from rescl.losses import LossConfig, SoftTargets, rescl_total_loss
from rescl.tensor import Tensor


def random_spec(rng: np.random.Generator) -> NetworkSpec:
    """Small random trunk mixing conv, BN, ReLU, pre-activation units, pooling and linear layers."""
    c = int(rng.integers(1, 4))
    h = int(rng.choice([4, 6, 8]))
    shape = [c, h]
    blocks: list = []
    for _ in range(int(rng.integers(1, 5))):
        kind = rng.choice(["conv", "bn", "relu", "unit", "pool"])
        if kind == "conv":
            if shape[1] % 2 == 0 and shape[1] >= 4 and rng.random() < 0.25:
                blocks.append(Conv(int(rng.integers(1, 5)), 2, 2, 0))
                shape[1] //= 2
            else:
                k = int(rng.choice([1, 3]))
                pad = k // 2 if rng.random() < 0.7 else 0
                if shape[1] + 2 * pad - k + 1 < 2:
                    pad = k // 2
                blocks.append(Conv(int(rng.integers(1, 5)), k, 1, pad))
                shape[1] = shape[1] + 2 * pad - k + 1
            shape[0] = blocks[-1].out_channels
        elif kind == "bn":
            blocks.append(BatchNorm())
        elif kind == "relu":
            blocks.append(ReLU())
        elif kind == "unit":
            out = int(rng.choice([shape[0], int(rng.integers(1, 5))]))
            blocks.append(PreActUnit(out))
            shape[0] = out
        elif shape[1] % 2 == 0 and shape[1] >= 4:
            blocks.append(AvgPool(2))
            shape[1] //= 2
    if rng.random() < 0.5:
        blocks.append(BatchNorm())
    if rng.random() < 0.5:
        blocks.append(ReLU())
    blocks.append(AvgPool(0) if rng.random() < 0.5 else Flatten())
    for _ in range(int(rng.integers(0, 3))):
        blocks.append(Linear(int(rng.integers(2, 6))))
        if rng.random() < 0.5:
            blocks.append(BatchNorm())
        blocks.append(ReLU())
    return NetworkSpec((c, h, h), tuple(blocks))


def randomize(net: Network, rng: np.random.Generator, scale: float = 0.5) -> Network:
    """Random weights, BN affine parameters and population statistics (in place)."""
    for k, v in net.params.items():
        if k.endswith(".gamma"):
            v[...] = rng.uniform(0.5, 1.5, v.shape)
        else:
            v[...] = rng.normal(0.0, scale, v.shape)
    for k, v in net.stats.items():
        if k.endswith("running_var"):
            v[...] = rng.uniform(0.5, 2.0, v.shape)
        else:
            v[...] = rng.normal(0.0, 0.5, v.shape)
    return net


def random_pair(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float64,
                source_task: str = "a", target_task: str = "b", k: int = 3):
    """Independent randomized source (head a) and target (heads a, b) networks."""
    net_s = Network.init(spec, rng, dtype).add_head(source_task, k, rng)
    net_t = Network.init(spec, rng, dtype).add_head(source_task, k, rng).add_head(target_task, k, rng)
    return randomize(net_s, rng), randomize(net_t, rng)


def random_combined(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float64):
    net_s, net_t = random_pair(spec, rng, dtype)
    c = build_combined(net_s, net_t, "b")
    for p in c.alphas:
        p.alpha_s[...] = rng.normal(0.0, 0.5, p.alpha_s.shape)
        p.alpha_t[...] = rng.normal(0.0, 0.5, p.alpha_t.shape)
    return c


def random_inputs(spec: NetworkSpec, rng: np.random.Generator, n: int = 5) -> np.ndarray:
    return rng.normal(0.0, 1.0, (n,) + tuple(spec.input_shape))


def random_soft(rng: np.random.Generator, n: int, k: int, tasks=("a",)) -> SoftTargets:
    def dist():
        return tc.softmax_np(rng.normal(0.0, 1.0, (n, k)))

    return SoftTargets({t: dist() for t in tasks}, dist(), 2.0)


def full_loss_check(c, x: np.ndarray, soft: SoftTargets, cfg: LossConfig, step: float = 1e-6) -> float:
    """grad_check of the whole combined objective over every trainable array of ``c``.

    Leaf tensors wrap the stored arrays themselves, so grad_check's in-place
    perturbations reach every forward pass.  The small step keeps central
    differences from straddling ReLU kinks deep in random networks.
    """
    store = c.param_store()
    leaves = {k: Tensor(v, requires_grad=True) for k, v in store.items()}

    def f():
        b = c.bind("train", set(store), update_stats=False)
        b.tgt.leaves.update({k[4:]: t for k, t in leaves.items() if k.startswith("tgt.")})
        b.alpha = [(leaves[alpha_name(i, "s")], leaves[alpha_name(i, "t")]) for i in range(len(c.alphas))]
        return rescl_total_loss(b, Tensor(x), soft, cfg)[0]

    return tc.grad_check(f, leaves.values(), step)
