import numpy as np
import pytest

from trinet import autodiff as ad
from trinet.autodiff import Tensor
from trinet.encoder import EncoderConfig, encode, frontend, init_encoder, parameter_count


@pytest.fixture
def small():
    cfg = EncoderConfig(input_dim=3, hidden_dim=8, num_blocks=2, num_heads=2, downsample_stride=4,
                        dropout_rate=0.1)
    return cfg, init_encoder(cfg, np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(hidden_dim=10, num_heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(num_blocks=1)
    with pytest.raises(ValueError):
        EncoderConfig(downsample_stride=0)


def test_parameter_count_is_function_of_config(small):
    cfg, params = small
    assert sum(p.data.size for p in params.values()) == parameter_count(cfg)
    again = init_encoder(cfg, np.random.default_rng(99))
    assert {k: v.shape for k, v in again.items()} == {k: v.shape for k, v in params.items()}


@pytest.mark.parametrize("t_in,expected", [(16, 4), (10, 3), (4, 1), (1, 1)])
def test_frontend_ceil_rule(small, t_in, expected):
    cfg, params = small
    out = frontend(Tensor(np.random.default_rng(1).normal(size=(2, t_in, 3))), params, cfg)
    assert out.shape == (2, expected, 8)


def test_frontend_pads_trailing_window_with_zeros(small):
    cfg, params = small
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 10, 3))
    padded = np.concatenate([x, np.zeros((1, 2, 3))], axis=1)
    np.testing.assert_array_equal(frontend(Tensor(x), params, cfg).data, frontend(Tensor(padded), params, cfg).data)


def test_frontend_identity_projection_is_layer_norm():
    cfg = EncoderConfig(input_dim=4, hidden_dim=4, num_blocks=2, num_heads=2, downsample_stride=1)
    params = init_encoder(cfg, np.random.default_rng(0))
    params["enc.frontend.w"] = Tensor(np.eye(4))
    x = np.random.default_rng(3).normal(size=(2, 5, 4))
    np.testing.assert_allclose(frontend(Tensor(x), params, cfg).data, ad.layer_norm(Tensor(x)).data, atol=1e-15)


def test_frontend_rejects_empty(small):
    cfg, params = small
    with pytest.raises(ad.ShapeError):
        frontend(Tensor(np.zeros((2, 0, 3))), params, cfg)


def test_encode_returns_one_output_per_block(small):
    cfg, params = small
    h = frontend(Tensor(np.random.default_rng(4).normal(size=(3, 12, 3))), params, cfg)
    outs = encode(h, params, cfg)
    assert len(outs) == 2
    assert all(o.shape == (3, 3, 8) for o in outs)


def test_encode_shape_mismatch(small):
    cfg, params = small
    with pytest.raises(ad.ShapeError):
        encode(Tensor(np.zeros((2, 3, 5))), params, cfg)


def test_encode_deterministic_without_dropout(small):
    cfg, params = small
    h = frontend(Tensor(np.random.default_rng(5).normal(size=(2, 16, 3))), params, cfg)
    a = encode(h, params, cfg, dropout_on=False)
    b = encode(h, params, cfg, dropout_on=False)
    for x, y in zip(a, b):
        assert np.array_equal(x.data, y.data)


def test_dropout_changes_output(small):
    cfg, params = small
    h = frontend(Tensor(np.random.default_rng(5).normal(size=(2, 16, 3))), params, cfg)
    a = encode(h, params, cfg, dropout_on=True, rng=np.random.default_rng(0))[-1]
    b = encode(h, params, cfg, dropout_on=False)[-1]
    assert not np.array_equal(a.data, b.data)


def test_attention_rows_sum_to_one(small):
    cfg, params = small
    trace = []
    h = frontend(Tensor(np.random.default_rng(6).normal(size=(2, 20, 3))), params, cfg)
    encode(h, params, cfg, trace=trace)
    assert len(trace) == cfg.num_blocks
    for probs in trace:
        assert probs.shape == (2, cfg.num_heads, 5, 5)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)


def test_batch_permutation_equivariance(small):
    cfg, params = small
    x = np.random.default_rng(7).normal(size=(4, 12, 3))
    perm = np.array([2, 0, 3, 1])
    a = encode(frontend(Tensor(x), params, cfg), params, cfg)
    b = encode(frontend(Tensor(x[perm]), params, cfg), params, cfg)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u.data[perm], v.data, atol=1e-13)


def test_every_parameter_receives_gradient(small):
    cfg, params = small
    x = np.random.default_rng(8).normal(size=(2, 12, 3))
    # a mean of layer-normed outputs has zero gradient; weight the frames randomly
    w = Tensor(np.random.default_rng(9).normal(size=(2, 3, 8)))
    outs = encode(frontend(Tensor(x), params, cfg), params, cfg)
    ad.zero_grad(params.values())
    ad.backward((outs[-1] * w).mean())
    dead = [name for name, p in params.items() if not np.any(p.grad)]
    assert dead == []


def test_output_norm_bounded_by_affine_gain(small):
    cfg, params = small
    rng = np.random.default_rng(10)
    for name, p in params.items():
        if name.endswith("ln_out.g"):
            p.data = rng.uniform(0.5, 2.0, size=p.shape)
    x = rng.normal(size=(3, 16, 3)) * 5
    outs = encode(frontend(Tensor(x), params, cfg), params, cfg)
    for i, out in enumerate(outs):
        gain = np.abs(params[f"enc.blocks.{i}.ln_out.g"].data).max()
        bias = np.linalg.norm(params[f"enc.blocks.{i}.ln_out.b"].data)
        norms = np.linalg.norm(out.data, axis=-1)
        assert (norms <= np.sqrt(cfg.hidden_dim) * gain + bias + 1e-12).all()


def test_encoder_gradients_match_finite_differences():
    from oracles import max_fd_error

    cfg = EncoderConfig(input_dim=2, hidden_dim=4, num_blocks=2, num_heads=2, downsample_stride=2)
    params = init_encoder(cfg, np.random.default_rng(11))
    x = np.random.default_rng(12).normal(size=(1, 6, 2))
    wq = params["enc.blocks.1.attn.wq"].data
    w1 = params["enc.blocks.0.ffn.w1"].data
    weights = np.random.default_rng(13).normal(size=(1, 3, 4))

    def build(a, b):
        p = dict(params)
        p["enc.blocks.1.attn.wq"] = a
        p["enc.blocks.0.ffn.w1"] = b
        out = encode(frontend(Tensor(x), p, cfg), p, cfg)[-1]
        return (out * Tensor(weights)).sum()

    assert max_fd_error(build, [wq, w1]) < 1e-4
