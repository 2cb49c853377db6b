import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rescl import tensor as tc
from rescl.combine import build_combined
from rescl.layers import Linear, Network, NetworkSpec, preact_resnet
from rescl.losses import (
    LossConfig,
    SoftTargets,
    alpha_decay,
    kl_tempered,
    lwf_loss,
    rescl_total_loss,
    weight_decay_l2,
)
from rescl.tensor import Tensor

from netutil import random_combined, random_pair, random_soft, randomize


def kl_value(p, logits, T):
    return float(kl_tempered(np.asarray(p, float), Tensor(np.asarray(logits, float)), T).data)


# -- tempered KL -------------------------------------------------------------------------

def test_kl_zero_when_target_matches_model():
    z = np.random.default_rng(0).standard_normal((5, 4))
    assert abs(kl_value(tc.softmax_np(z, 2.0), z, 2.0)) < 1e-12


def test_kl_hand_example():
    # logits [0, 0] give q = [0.5, 0.5] at any temperature
    want = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    assert kl_value([[0.75, 0.25]], [[0.0, 0.0]], 2.0) == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(0.13081, abs=1e-5)


def test_kl_nonnegative_on_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(100):
        k = int(rng.integers(2, 6))
        p = rng.dirichlet(np.ones(k), size=3)
        assert kl_value(p, rng.normal(0, 3, (3, k)), 2.0) >= -1e-12


def test_kl_one_hot_is_tempered_cross_entropy():
    z = np.random.default_rng(2).standard_normal((4, 3))
    labels = np.array([0, 2, 1, 1])
    want = -np.mean(tc.log_softmax_np(z, 2.0)[np.arange(4), labels])
    assert float(kl_tempered(labels, Tensor(z), 2.0).data) == pytest.approx(want, rel=1e-12)


def test_kl_zero_mass_terms_and_errors():
    assert np.isfinite(kl_value([[1.0, 0.0]], [[3.0, -1.0]], 2.0))
    with pytest.raises(ValueError):
        kl_value([[1.0, 0.0]], [[0.0, 0.0]], 0.0)
    with pytest.raises(FloatingPointError):
        kl_value([[1.0, 0.0]], [[np.nan, 0.0]], 2.0)
    with pytest.raises(ValueError):
        kl_value([[1.0, 0.0, 0.0]], [[0.0, 0.0]], 2.0)


def test_kl_gradient():
    rng = np.random.default_rng(3)
    z = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    p = rng.dirichlet(np.ones(3), size=4)
    assert tc.grad_check(lambda: kl_tempered(p, z, 2.0), [z]) <= 1e-7
    labels = np.array([0, 1, 2, 0])
    assert tc.grad_check(lambda: kl_tempered(labels, z, 1.0), [z]) <= 1e-7


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.sampled_from([1.0, 2.0, 4.0]))
def test_kl_zero_iff_distributions_match(seed, T):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 2, (3, 4))
    q = tc.softmax_np(z, T)
    assert abs(kl_value(q, z, T)) <= 1e-9
    p = rng.dirichlet(np.ones(4), size=3)
    if np.abs(p - q).max() > 1e-3:
        assert kl_value(p, z, T) > 1e-9


# -- alpha and weight decay --------------------------------------------------------------

def test_alpha_decay_examples():
    a_s, a_t = Tensor(np.array([-0.5])), Tensor(np.array([0.5]))
    assert float(alpha_decay([a_s, a_t], 1.0, "l1").data) == 1.0
    assert float(alpha_decay([a_s, a_t], 1.0, "l2").data) == 0.25
    assert float(alpha_decay([Tensor(np.zeros(3)), Tensor(np.zeros(3))], 1.0).data) == 0.0


def test_l1_subgradient_at_zero_is_zero():
    a = Tensor(np.array([0.0, 0.3, -0.2]), requires_grad=True)
    alpha_decay([a], 2.0, "l1").backward()
    assert a.grad.tolist() == [0.0, 2.0, -2.0]


def test_alpha_decay_errors():
    with pytest.raises(ValueError):
        alpha_decay([Tensor(np.ones(1))], -1.0)
    with pytest.raises(ValueError):
        alpha_decay([Tensor(np.ones(1))], 1.0, "l3")


def test_weight_decay_examples():
    assert float(weight_decay_l2([Tensor(np.zeros((2, 2)))], 1e-4).data) == 0.0
    assert float(weight_decay_l2([Tensor(np.array([3.0]))], 0.0001).data) == pytest.approx(0.00045, rel=1e-12)


def test_weight_decay_gradient():
    rng = np.random.default_rng(4)
    w = [Tensor(rng.standard_normal(s), requires_grad=True) for s in ((3, 2), (4,))]
    loss = weight_decay_l2(w, 0.01)
    loss.backward()
    for t in w:
        np.testing.assert_allclose(t.grad, 0.01 * t.data, rtol=1e-15)
    assert tc.grad_check(lambda: weight_decay_l2(w, 0.01), w) <= 1e-7


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lam=-1.0)
    with pytest.raises(ValueError):
        LossConfig(temperature=0.0)
    with pytest.raises(ValueError):
        LossConfig(alpha_norm="l0")
    with pytest.raises(ValueError):
        LossConfig(parameterization="other")


# -- full objective ----------------------------------------------------------------------

def test_total_loss_zero_when_outputs_match_soft_targets():
    rng = np.random.default_rng(5)
    c = random_combined(preact_resnet(), rng)
    x = rng.uniform(0, 1, (4, 3, 8, 8))
    b = c.bind("train", set(), update_stats=False)
    feats = b.features(Tensor(x))
    soft = SoftTargets({"a": tc.softmax_np(b.head(feats, "a").data, 2.0)},
                       tc.softmax_np(b.head(feats, "b").data, 2.0))
    loss, parts = rescl_total_loss(c.bind("train", set(c.param_store()), update_stats=False), Tensor(x), soft,
                                   LossConfig(lam=0.0, lam_dec=0.0))
    assert abs(float(loss.data)) < 1e-12
    assert set(parts) == {"lwf.a", "distill", "alpha_decay", "weight_decay"}


def test_total_loss_is_the_sum_of_its_terms():
    rng = np.random.default_rng(6)
    c = random_combined(preact_resnet(), rng)
    x = Tensor(rng.uniform(0, 1, (4, 3, 8, 8)))
    loss, parts = rescl_total_loss(c.bind("train", set(c.param_store()), update_stats=False), x,
                                   random_soft(rng, 4, 3), LossConfig(lam=0.3, lam_dec=0.01))
    assert float(loss.data) == pytest.approx(sum(parts.values()), rel=1e-12)
    alphas = np.concatenate([np.r_[p.alpha_s, p.alpha_t] for p in c.alphas])
    assert parts["alpha_decay"] == pytest.approx(0.3 * np.abs(alphas).sum(), rel=1e-12)


def test_total_loss_requires_soft_targets():
    rng = np.random.default_rng(7)
    c = random_combined(preact_resnet(), rng)
    b = c.bind("train", set(c.param_store()))
    with pytest.raises(ValueError):
        rescl_total_loss(b, Tensor(rng.uniform(0, 1, (4, 3, 8, 8))), SoftTargets({"a": np.ones((4, 3)) / 3}, None),
                         LossConfig())
    with pytest.raises(ValueError):
        rescl_total_loss(b, Tensor(rng.uniform(0, 1, (4, 3, 8, 8))), SoftTargets({}, np.ones((4, 3)) / 3),
                         LossConfig())


def test_total_loss_decreases_under_sgd():
    from rescl.trainer import sgd_step

    rng = np.random.default_rng(8)
    net_s, net_t = random_pair(preact_resnet((3, 4, 4), widths=(4,)), rng)
    c = build_combined(net_s, net_t, "b")
    x = rng.uniform(0, 1, (64, 3, 4, 4))
    soft = random_soft(rng, 64, 3)
    cfg = LossConfig(lam=1e-3)
    store, vel, trace = c.param_store(), {}, []
    for _ in range(50):
        b = c.bind("train", set(store))
        loss, _ = rescl_total_loss(b, Tensor(x), soft, cfg)
        trace.append(float(loss.data))
        loss.backward()
        sgd_step(store, {k: t.grad for k, t in b.leaves().items()}, vel, 0.01, 0.9)
    assert trace[-1] < trace[0]


def test_lwf_term_matches_rescl_source_term_bitwise():
    rng = np.random.default_rng(9)
    spec = NetworkSpec((3,), (Linear(4),))
    net_s = randomize(Network.init(spec, rng, np.float64).add_head("a", 3, rng), rng)
    net_t = net_s.add_head("b", 3, rng)
    x = rng.standard_normal((5, 3))
    soft = random_soft(rng, 5, 3)
    # alpha = 0 makes the combined source-head logits those of the plain source network
    c = build_combined(net_s, net_t, "b", alpha_init=(0.0, 0.0))
    cfg = LossConfig()
    _, parts_r = rescl_total_loss(c.bind("train", set(c.param_store())), Tensor(x), soft, cfg)
    _, parts_l = lwf_loss(net_s.path("train", net_s.params), net_s, Tensor(x), np.zeros(5, np.int64),
                          soft.source, "a", 1.0, cfg)
    assert parts_r["lwf.a"] == parts_l["lwf.a"]
