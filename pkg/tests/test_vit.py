import math

import numpy as np
import pytest

from conftest import tiny_config
from ewavit.ewa import build_ewa_model
from ewavit.tensor import Tensor
from ewavit.vit import (ViTConfig, attention_forward, copy_model, cross_entropy, dense_param_count,
                        init_vit, model_forward, moe_param_count, patchify)


def test_patchify_row_major_order():
    img = np.arange(2 * 4 * 4, dtype=float).reshape(1, 2, 4, 4)
    p = patchify(img, 2)
    assert p.shape == (1, 4, 8)
    # second patch is the top-right 2x2 square of both channels
    np.testing.assert_array_equal(p[0, 1], [2, 3, 6, 7, 18, 19, 22, 23])


def test_output_shape_and_eval_determinism(rng):
    cfg = tiny_config()
    model = init_vit(cfg, rng)
    x = rng.standard_normal((3, 3, 8, 8))
    a = model_forward(model, x).data
    assert a.shape == (3, cfg.n_classes)
    np.testing.assert_array_equal(a, model_forward(model, x).data)


def test_dense_param_count_closed_form(rng):
    for cfg in (tiny_config(), tiny_config(qkv_bias=False), ViTConfig()):
        assert init_vit(cfg, rng).num_params() == dense_param_count(cfg)


def test_moe_param_count_closed_form(rng):
    cfg = tiny_config()
    for mode, routed in (("rup", False), ("topk", True)):
        m = build_ewa_model(cfg, "every-2", 3, mode, rng)
        assert m.num_params() == moe_param_count(cfg, 2, 3, routed)


def test_input_shape_errors(rng):
    model = init_vit(tiny_config(), rng)
    with pytest.raises(ValueError):
        model_forward(model, np.zeros((1, 3, 16, 16)))
    with pytest.raises(ValueError):
        model_forward(model, np.zeros((1, 3, 8, 8)), mode="train")


def test_config_validation():
    with pytest.raises(ValueError):
        ViTConfig(image_size=30, patch_size=4)
    with pytest.raises(ValueError):
        ViTConfig(d_model=10, n_heads=3)


def test_attention_rows_are_distributions(rng):
    model = init_vit(tiny_config(), rng)
    out, w = attention_forward(model.blocks[0], Tensor(rng.standard_normal((5, 8))), 2, return_weights=True)
    assert out.shape == (5, 8)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-14)


def test_cross_entropy_oracles():
    assert cross_entropy(Tensor(np.zeros((1, 7))), [3]).item() == pytest.approx(math.log(7))
    assert cross_entropy(Tensor([[0.0, 0.0]]), [0], 0.1).item() == pytest.approx(math.log(2), abs=1e-15)
    assert cross_entropy(Tensor([[60.0, 0.0, 0.0]]), [0]).item() < 1e-20
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_train_mode_dropout_depends_on_rng(rng):
    cfg = tiny_config(dropout=0.2, drop_path=0.1)
    model = init_vit(cfg, rng)
    x = rng.standard_normal((2, 3, 8, 8))
    a = model_forward(model, x, "train", np.random.default_rng(0)).data
    b = model_forward(model, x, "train", np.random.default_rng(0)).data
    c = model_forward(model, x, "train", np.random.default_rng(1)).data
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_copy_model_shares_no_buffers(rng):
    model = init_vit(tiny_config(), rng)
    clone = copy_model(model)
    for (n, a), b in zip(model.named_parameters().items(), clone.named_parameters().values()):
        assert a is not b and not np.shares_memory(a.data, b.data), n
        np.testing.assert_array_equal(a.data, b.data)
