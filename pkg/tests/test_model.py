import math

import numpy as np
import pytest

from csibert import tensor_core as tc
from csibert.checks import model_grad_error
from csibert.exceptions import ConfigError
from csibert.model import (
    ModelConfig,
    as_tensors,
    desk_model_config,
    embed,
    encoder_layer,
    forward,
    head,
    init_params,
    mhsa,
    paper_model_config,
    param_count,
    param_shapes,
    predict,
)
from csibert.tensor_core import Tensor, grad_check
from csibert.training import mse_loss

import oracles


@pytest.fixture
def small_cfg():
    return ModelConfig(feature_dim=6, max_len=5, d_model=8, n_layers=2, n_heads=2, d_ff=12)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(feature_dim=4, max_len=4, d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(feature_dim=0, max_len=4)


def test_presets():
    p = paper_model_config()
    assert (p.n_layers, p.n_heads, p.d_k) == (12, 12, 64)
    d = desk_model_config()
    assert (d.d_model, d.n_layers, d.n_heads, d.d_ff) == (64, 2, 4, 128)


def test_desk_param_count():
    cfg = desk_model_config(feature_dim=32, max_len=16)
    expected = oracles.desk_param_count(64, 2, 128, 32, 16)
    assert expected == 75936
    assert param_count(cfg) == expected
    assert sum(v.size for v in init_params(cfg).values()) == expected


def test_plain_head_drops_intermediate():
    cfg = desk_model_config(plain_head=True)
    assert param_count(desk_model_config()) - param_count(cfg) == 64 * 64 + 3 * 64
    assert "head.W_inter" not in param_shapes(cfg)


def test_init_deterministic(small_cfg):
    a, b = init_params(small_cfg, 3), init_params(small_cfg, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = init_params(small_cfg, 4)
    assert not np.array_equal(a["layer0.W_Q"], c["layer0.W_Q"])


def test_init_distributions(small_cfg):
    p = init_params(small_cfg)
    assert np.all(p["layer0.ln1.gain"] == 1.0) and np.all(p["head.ln.gain"] == 1.0)
    assert np.all(p["feature.b"] == 0.0)
    assert np.max(np.abs(p["layer1.ffn.W2"])) <= 1 / math.sqrt(12)
    big = init_params(ModelConfig(feature_dim=4, max_len=512, d_model=64, n_heads=4))
    assert big["time_embedding"].std() == pytest.approx(0.02, rel=0.05)


# embed


def test_embed_zero_input_is_time(small_cfg):
    params = as_tensors(init_params(small_cfg))
    z = embed(params, np.zeros((1, 5, 6)), small_cfg)
    assert np.array_equal(z.data[0], params["time_embedding"].data)
    assert z.shape == (1, 5, 8)


def test_embed_row_locality(small_cfg, rng):
    params = as_tensors(init_params(small_cfg))
    x = rng.normal(size=(1, 5, 6))
    z0 = embed(params, x, small_cfg).data
    x[0, 2] += 1.0
    z1 = embed(params, x, small_cfg).data
    changed = np.flatnonzero(np.any(z0 != z1, axis=-1)[0])
    assert changed.tolist() == [2]


def test_embed_shape_mismatch(small_cfg):
    with pytest.raises(ConfigError):
        embed(as_tensors(init_params(small_cfg)), np.zeros((1, 5, 7)), small_cfg)


# attention


def _single_head(cfg, params):
    return {k: Tensor(v) for k, v in params.items()}


def test_identical_value_rows(rng):
    cfg = ModelConfig(feature_dim=2, max_len=4, d_model=3, n_heads=1, n_layers=1, d_ff=2)
    p = init_params(cfg)
    z = np.tile(rng.normal(size=3), (4, 1))[None]  # identical rows -> identical values
    out = mhsa(Tensor(z), np.ones((1, 4)), as_tensors(p), "layer0.", cfg).data
    v = z[0, 0] @ p["layer0.W_V"]
    np.testing.assert_allclose(out[0], np.tile(v @ p["layer0.W_O"], (4, 1)), atol=1e-14)


def test_two_token_hand_case():
    cfg = ModelConfig(feature_dim=1, max_len=2, d_model=1, n_heads=1, n_layers=1, d_ff=1)
    p = {k: Tensor(v) for k, v in init_params(cfg).items()}
    for w in ("W_Q", "W_K", "W_V", "W_O"):
        p["layer0." + w] = Tensor([[1.0]])
    b = 1.0 + math.log(2)
    z = Tensor([[[1.0], [b]]])  # query 0 sees scores [1, b], a shift of [0, ln 2]
    out, weights = mhsa(z, np.ones((1, 2)), p, "layer0.", cfg, return_weights=True)
    np.testing.assert_allclose(weights.data[0, 0, 0], [1 / 3, 2 / 3], atol=1e-15)
    assert out.data[0, 0, 0] == pytest.approx(1 / 3 + 2 / 3 * b, abs=1e-14)


def test_padded_keys_get_zero_weight(small_cfg, rng):
    params = as_tensors(init_params(small_cfg))
    z = Tensor(rng.normal(size=(2, 5, 8)))
    attn = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1.0]])
    _, w = mhsa(z, attn, params, "layer0.", small_cfg, return_weights=True)
    assert np.all(w.data[0, ..., 3:] == 0.0)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12)


# encoder layer / head / forward


def test_encoder_layer_shape(small_cfg, rng):
    z = Tensor(rng.normal(size=(2, 5, 8)))
    out = encoder_layer(z, np.ones((2, 5)), as_tensors(init_params(small_cfg)), 0, small_cfg)
    assert out.shape == z.shape


def test_padding_isolation(small_cfg, rng):
    params = init_params(small_cfg, 1)
    x = rng.normal(size=(5, 6))
    attn = np.array([1, 1, 1, 0, 0.0])
    x[3:] = 0
    base = predict(params, x, attn, small_cfg)
    x[3:] = rng.normal(size=(2, 6)) * 100
    other = predict(params, x, attn, small_cfg)
    assert np.max(np.abs(base[:3] - other[:3])) <= 1e-9


def test_layer_padding_isolation(small_cfg, rng):
    params = as_tensors(init_params(small_cfg, 2))
    attn = np.array([[1, 1, 0, 0, 0.0]])
    z = rng.normal(size=(1, 5, 8))
    a = encoder_layer(Tensor(z), attn, params, 0, small_cfg).data
    z[0, 2:] = rng.normal(size=(3, 8))
    b = encoder_layer(Tensor(z), attn, params, 0, small_cfg).data
    assert np.max(np.abs(a[0, :2] - b[0, :2])) <= 1e-9


def test_plain_head_equation(rng):
    cfg = ModelConfig(feature_dim=6, max_len=5, d_model=8, n_heads=2, plain_head=True)
    p = init_params(cfg)
    p["head.b_out"] = rng.normal(size=6)
    z = rng.normal(size=(1, 5, 8))
    out = head(Tensor(z), as_tensors(p), cfg).data
    np.testing.assert_array_equal(out, z @ p["head.W_out"] + p["head.b_out"])


def test_full_head_equation(small_cfg, rng):
    p = init_params(small_cfg)
    z = rng.normal(size=(1, 5, 8))
    hidden = np.vectorize(oracles.gelu)(z @ p["head.W_inter"] + p["head.b_inter"])
    mu, var = hidden.mean(-1, keepdims=True), hidden.var(-1, keepdims=True)
    expected = (hidden - mu) / np.sqrt(var + 1e-5) @ p["head.W_out"] + p["head.b_out"]
    np.testing.assert_allclose(head(Tensor(z), as_tensors(p), small_cfg).data, expected, atol=1e-12)


def test_head_grad(small_cfg, rng):
    params = as_tensors(init_params(small_cfg))
    head_params = [v for k, v in params.items() if k.startswith("head.")]
    z = Tensor(rng.normal(size=(1, 5, 8)))
    r = Tensor(rng.normal(size=(1, 5, 6)))
    assert grad_check(lambda: tc.sum_all(tc.mul(head(z, params, small_cfg), r)), head_params) < 1e-4


def test_forward_shape_and_determinism(small_cfg, rng):
    params = init_params(small_cfg, 5)
    x = rng.normal(size=(3, 5, 6))
    a, b = predict(params, x, None, small_cfg), predict(params, x.copy(), None, small_cfg)
    assert a.shape == x.shape
    assert a.tobytes() == b.tobytes()
    assert np.all(np.isfinite(a))
    assert predict(params, x[0], None, small_cfg).shape == (5, 6)


def test_forward_rejects_all_padding(small_cfg):
    with pytest.raises(ConfigError):
        predict(init_params(small_cfg), np.zeros((5, 6)), np.zeros(5), small_cfg)


def test_forward_requires_config(small_cfg):
    with pytest.raises(ConfigError):
        forward(as_tensors(init_params(small_cfg)), np.zeros((5, 6)))


def test_permutation_equivariance(small_cfg, rng):
    p = init_params(small_cfg, 6)
    p["time_embedding"] = np.zeros_like(p["time_embedding"])
    x = rng.normal(size=(5, 6))
    perm = rng.permutation(5)
    np.testing.assert_allclose(predict(p, x[perm], None, small_cfg), predict(p, x, None, small_cfg)[perm], atol=1e-12)


def test_end_to_end_grad_desk_dims():
    cfg = desk_model_config(feature_dim=32, max_len=16, n_layers=1)
    rng = np.random.default_rng(0)
    params = as_tensors(init_params(cfg, 0))
    # gradient check restricted to a representative subset keeps the test quick
    subset = [params[k] for k in ("feature.W", "layer0.W_Q", "layer0.ffn.W1", "head.W_out", "layer0.ln2.gain")]
    x = rng.normal(size=(1, 16, 32))
    assert grad_check(lambda: mse_loss(forward(params, x, None, cfg), x), subset) < 1e-3


def test_full_model_grad_small():
    assert model_grad_error(ModelConfig(feature_dim=4, max_len=4, d_model=8, n_layers=2, n_heads=2, d_ff=8), 3) < 1e-3
