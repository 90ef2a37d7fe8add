import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ewavit.ffn import FFNParams, ffn_forward
from ewavit.moe import (RUP, TOPK, MoELayer, dispatch_topk, expert_capacity, init_router,
                        load_balance_loss, moe_rup_forward, moe_topk_forward, router_scores,
                        rup_partition, top_k_indices)
from ewavit.tensor import Tensor, backward, grad_check_params


def make_layer(n=4, d=6, h=10, mode=RUP, k=1, cap=1.05, seed=0):
    rng = np.random.default_rng(seed)
    experts = [FFNParams.init(d, h, rng, std=0.5) for _ in range(n)]
    router = init_router(d, n, rng, std=0.5) if mode == TOPK else None
    return MoELayer(experts, mode, router, k, cap)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 200), st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_rup_partition_is_balanced_cover(t, n, seed):
    if t < n:
        return
    part = rup_partition(t, n, np.random.default_rng(seed))
    sizes = part.sizes
    assert max(sizes) - min(sizes) <= 1
    assert sorted(sizes, reverse=True) == sizes  # remainder goes to the first experts
    assert np.array_equal(np.sort(np.concatenate(part.token_lists)), np.arange(t))
    for i, idx in enumerate(part.token_lists):
        assert np.all(part.expert_of_token[idx] == i)


def test_rup_partition_rejects_too_few_tokens():
    with pytest.raises(ValueError):
        rup_partition(3, 4, np.random.default_rng(0))


def test_rup_with_identical_experts_equals_single_ffn():
    layer = make_layer()
    for e in layer.experts[1:]:
        for name, t in e.tensors().items():
            t.data = layer.experts[0].tensors()[name].data.copy()
    x = Tensor(np.random.default_rng(1).standard_normal((37, 6)))
    out = moe_rup_forward(layer, x, np.random.default_rng(2))
    np.testing.assert_allclose(out.data, ffn_forward(layer.experts[0], x).data, atol=1e-14)


def test_rup_routes_each_token_through_its_expert():
    layer = make_layer(n=3)
    x = Tensor(np.random.default_rng(1).standard_normal((10, 6)))
    part = rup_partition(10, 3, np.random.default_rng(5))
    out = moe_rup_forward(layer, x, partition=part)
    for tok in range(10):
        e = layer.experts[part.expert_of_token[tok]]
        np.testing.assert_allclose(out.data[tok], ffn_forward(e, Tensor(x.data[tok:tok + 1])).data[0], atol=1e-14)


def test_rup_eval_is_repeatable_and_train_needs_rng():
    layer = make_layer()
    x = Tensor(np.random.default_rng(1).standard_normal((16, 6)))
    a = moe_rup_forward(layer, x, mode="eval").data
    b = moe_rup_forward(layer, x, mode="eval").data
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        moe_rup_forward(layer, x, mode="train")


def test_rup_gradients_with_fixed_partition():
    layer = make_layer(n=2, d=3, h=4)
    x = Tensor(np.random.default_rng(1).standard_normal((7, 3)), requires_grad=True)
    part = rup_partition(7, 2, np.random.default_rng(3))
    weights = np.random.default_rng(4).standard_normal((7, 3))
    params = [x] + [t for e in layer.experts for t in e.tensors().values()]
    err = grad_check_params(lambda: (moe_rup_forward(layer, x, partition=part) * weights).sum(), params)
    assert err < 1e-6


def test_top_k_ties_favour_lower_index():
    probs = np.array([[0.25, 0.25, 0.25, 0.25], [0.1, 0.4, 0.4, 0.1]])
    np.testing.assert_array_equal(top_k_indices(probs, 2), [[0, 1], [1, 2]])


def test_router_scores_keep_top_k_unnormalised():
    layer = make_layer(mode=TOPK, k=2)
    x = Tensor(np.random.default_rng(1).standard_normal((5, 6)))
    s = router_scores(layer, x).data
    assert np.all((s > 0).sum(axis=1) == 2)
    assert np.all(s.sum(axis=1) < 1.0)


def test_capacity_formula():
    assert expert_capacity(64, 4, 1, 1.05) == 17  # ceil(16.8)
    assert expert_capacity(64, 4, 2, 1.0) == 32
    assert expert_capacity(10, 3, 1, 1.0) == 4


def test_dispatch_drops_overflow_in_token_order():
    probs = np.tile([0.7, 0.2, 0.1], (5, 1))
    plan = dispatch_topk(probs, 1, capacity=2)
    np.testing.assert_array_equal(plan.token_lists[0], [0, 1])
    assert plan.dropped == 3
    np.testing.assert_array_equal(plan.kept[:, 0], [True, True, False, False, False])


def test_dropped_tokens_output_zero():
    layer = make_layer(mode=TOPK, cap=0.25)
    x = Tensor(np.random.default_rng(1).standard_normal((16, 6)))
    out, _ = moe_topk_forward(layer, x)
    plan = dispatch_topk(_probs(layer, x), 1, expert_capacity(16, 4, 1, 0.25))
    dropped = ~plan.kept[:, 0]
    assert dropped.any()
    np.testing.assert_array_equal(out.data[dropped], 0.0)


def _probs(layer, x):
    z = x.data @ layer.router.data
    z = np.exp(z - z.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def test_topk_all_experts_matches_dense_gate_mixture():
    layer = make_layer(mode=TOPK, k=4, cap=10.0)
    x = Tensor(np.random.default_rng(1).standard_normal((12, 6)))
    out, _ = moe_topk_forward(layer, x)
    g = _probs(layer, x)
    ref = sum(g[:, [i]] * ffn_forward(e, x).data for i, e in enumerate(layer.experts))
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_load_balance_loss_uniform_equals_weight():
    n, t = 4, 8
    probs = Tensor(np.full((t, n), 1.0 / n))
    top1 = np.arange(t) % n
    assert load_balance_loss(probs, top1, 0.01).item() == pytest.approx(0.01, abs=1e-15)


def test_load_balance_loss_collapsed_router_is_n_times_weight():
    probs = Tensor(np.tile([1.0, 0.0, 0.0, 0.0], (8, 1)))
    assert load_balance_loss(probs, np.zeros(8, int), 0.01).item() == pytest.approx(0.04)


def test_topk_gradients_reach_router():
    layer = make_layer(n=3, d=3, h=4, mode=TOPK, k=2, cap=2.0)
    x = Tensor(np.random.default_rng(1).standard_normal((6, 3)))
    w = np.random.default_rng(2).standard_normal((6, 3))

    def loss():
        out, aux = moe_topk_forward(layer, x)
        return (out * w).sum() + aux

    params = [layer.router] + [t for e in layer.experts for t in e.tensors().values()]
    assert grad_check_params(loss, params) < 1e-5
    layer.router.grad = None
    backward(loss())
    assert np.any(layer.router.grad != 0)


def test_layer_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        MoELayer([FFNParams.init(4, 8, rng), FFNParams.init(4, 6, rng)])
    with pytest.raises(ValueError):
        MoELayer([FFNParams.init(4, 8, rng)], TOPK)
    with pytest.raises(ValueError):
        MoELayer([FFNParams.init(4, 8, rng)] * 2, TOPK, init_router(4, 2, rng), k=3)
