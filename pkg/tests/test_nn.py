import math

import numpy as np
import pytest

from conftest import central_difference, gradient_error, relative_error
from dysadapt.errors import AlignmentError, ConfigurationError, DimensionError, InputTooShortError
from dysadapt.nn import (
    ParamStore,
    Tensor,
    concat_features,
    conv_subsample,
    layer_norm,
    linear,
    multi_head_attention,
    no_grad,
    relu,
    stats_pool,
    tsum,
)
from dysadapt.trainer.optim import AdamW, TrainConfig


def _attn_params(rng, h, identity=False):
    p = {}
    for proj in "qkvo":
        p[f"w{proj}"] = Tensor(np.eye(h) if identity else rng.normal(scale=0.5, size=(h, h)), requires_grad=True)
        p[f"b{proj}"] = Tensor(np.zeros(h) if identity else rng.normal(scale=0.1, size=h), requires_grad=True)
    return p


# -- linear ------------------------------------------------------------------


def test_linear_identity():
    out = linear(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    assert out.values.tolist() == [[1.0, 2.0]]


def test_linear_hand_multiply():
    out = linear(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[2.0, 0.0], [0.0, 3.0]]), Tensor([1.0, 1.0]))
    assert out.values.tolist() == [[3.0, 1.0], [1.0, 4.0]]


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
        linear(Tensor(np.ones((1, 3))), Tensor(np.eye(2)), Tensor(np.zeros(2)))


def test_linear_weight_gradient_matches_finite_difference(rng):
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=5), requires_grad=True)
    tsum(linear(x, w, b)).backward()

    def f():
        return float(tsum(linear(x, w, b)).values)

    for t in (x, w, b):
        assert relative_error(t.grad, central_difference(f, t.values)) < 1e-6


# -- relu ----------------------------------------------------------------------


def test_relu_values():
    assert relu(Tensor([-1.0, 0.0, 2.0])).values.tolist() == [0.0, 0.0, 2.0]
    pos = np.array([0.5, 3.0, 1e-3])
    assert np.array_equal(relu(Tensor(pos)).values, pos)


def test_relu_gradient_at_zero_is_zero():
    x = Tensor([0.0, 1.0, -1.0], requires_grad=True)
    tsum(relu(x)).backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_relu_gradient_away_from_kink(rng):
    values = rng.normal(size=(5, 4))
    values[np.abs(values) < 1e-3] = 0.5
    x = Tensor(values, requires_grad=True)
    weights = rng.normal(size=values.shape)
    relu(x).backward(weights)

    def f():
        return float((relu(x).values * weights).sum())

    assert relative_error(x.grad, central_difference(f, x.values)) < 1e-6


# -- layer norm ----------------------------------------------------------------


def test_layer_norm_zero_variance_row():
    out = layer_norm(Tensor([[1.0, 1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    assert out.values.tolist() == [[0.0, 0.0]]


def test_layer_norm_hand_standardised_row():
    out = layer_norm(Tensor([[0.0, 2.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-14)
    np.testing.assert_allclose(out.values, [[-1.0, 1.0]], atol=1e-12)


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ConfigurationError):
        layer_norm(Tensor([[0.0, 2.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


def test_layer_norm_gradient(rng):
    x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    g = Tensor(rng.normal(size=6), requires_grad=True)
    b = Tensor(rng.normal(size=6), requires_grad=True)
    weights = rng.normal(size=(3, 6))
    layer_norm(x, g, b).backward(weights)

    def f():
        return float((layer_norm(x, g, b).values * weights).sum())

    for t in (x, g, b):
        assert relative_error(t.grad, central_difference(f, t.values)) < 1e-5


# -- attention -----------------------------------------------------------------


def test_attention_single_frame_is_projection_of_value(rng):
    h = 4
    p = _attn_params(rng, h)
    x = rng.normal(size=(1, h))
    out = multi_head_attention(Tensor(x), p, n_heads=2)
    v = x @ p["wv"].values + p["bv"].values
    expected = v @ p["wo"].values + p["bo"].values
    np.testing.assert_allclose(out.values, expected, rtol=0, atol=1e-14)


def test_attention_two_frames_hand_computed():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = multi_head_attention(Tensor(x), _attn_params(None, 2, identity=True), n_heads=1)
    a = 1.0 / math.sqrt(2.0)
    # row 0 scores (a, 0), row 1 scores (0, a)
    w_self = math.exp(a) / (math.exp(a) + 1.0)
    expected = [[w_self, 1.0 - w_self], [1.0 - w_self, w_self]]
    np.testing.assert_allclose(out.values, expected, rtol=0, atol=1e-12)


def test_attention_rows_sum_to_one(rng):
    x = Tensor(rng.normal(size=(2, 7, 8)))
    _, weights = multi_head_attention(x, _attn_params(rng, 8), n_heads=4, lengths=[7, 4], return_weights=True)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(weights[1, :, :, 4:] == 0.0)


def test_attention_head_divisibility():
    with pytest.raises(ConfigurationError):
        multi_head_attention(Tensor(np.ones((2, 6))), _attn_params(np.random.default_rng(0), 6), n_heads=4)


def test_attention_gradient(rng):
    x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    p = _attn_params(rng, 4)
    weights = rng.normal(size=(5, 4))
    multi_head_attention(x, p, 2).backward(weights)

    def f():
        return float((multi_head_attention(x, p, 2).values * weights).sum())

    assert gradient_error(f, (x, *p.values())) < 1e-5


# -- conv subsampler -----------------------------------------------------------


def _conv_params(rng, c_in, h, ones=False):
    shapes = [(3 * c_in, h), (3 * h, h)]
    return [
        (
            Tensor(np.ones(s) if ones else rng.normal(scale=0.4, size=s), requires_grad=True),
            Tensor(np.zeros(s[1]) if ones else rng.normal(scale=0.1, size=s[1]), requires_grad=True),
        )
        for s in shapes
    ]


@pytest.mark.parametrize("length,frames", [(16, 4), (4, 1), (40, 10), (19, 4)])
def test_conv_subsample_lengths(rng, length, frames):
    out, lens = conv_subsample(Tensor(rng.normal(size=(length, 1))), _conv_params(rng, 1, 3), 4)
    assert out.shape == (frames, 3) and lens == [frames]


def test_conv_subsample_too_short(rng):
    with pytest.raises(InputTooShortError):
        conv_subsample(Tensor(np.ones((3, 1))), _conv_params(rng, 1, 2), 4)


def test_conv_all_ones_kernel_on_constant_input():
    # layer 1: 3 taps * c -> 3c per channel; layer 2: 3 taps * 2 channels * 3c -> 18c
    out, _ = conv_subsample(Tensor(np.full((16, 1), 0.5)), _conv_params(None, 1, 2, ones=True), 4)
    np.testing.assert_array_equal(out.values, np.full((4, 2), 9.0))


def test_conv_gradient(rng):
    x = Tensor(rng.normal(size=(13, 2)), requires_grad=True)
    params = _conv_params(rng, 2, 3)
    out, _ = conv_subsample(x, params, 4)
    weights = rng.normal(size=out.shape)
    out.backward(weights)

    def f():
        return float((conv_subsample(x, params, 4)[0].values * weights).sum())

    assert gradient_error(f, (x, *[t for pair in params for t in pair])) < 1e-5


def test_conv_batched_matches_single(rng):
    params = _conv_params(rng, 2, 3)
    a, b = rng.normal(size=(17, 2)), rng.normal(size=(12, 2))
    batch = np.zeros((2, 17, 2))
    batch[0], batch[1, :12] = a, b
    out, lens = conv_subsample(Tensor(batch), params, 4, [17, 12])
    assert lens == [4, 3]
    np.testing.assert_array_equal(out.values[1, :3], conv_subsample(Tensor(b), params, 4)[0].values)


# -- concat --------------------------------------------------------------------


def test_concat_definition():
    out = concat_features(Tensor([[9.0], [8.0]]), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    assert out.values.tolist() == [[9.0, 1.0, 2.0], [8.0, 3.0, 4.0]]


def test_concat_empty_left_is_identity():
    b = Tensor([[1.0, 2.0]])
    assert concat_features(None, b) is b
    assert concat_features(Tensor(np.zeros((1, 0))), b) is b


def test_concat_time_mismatch():
    with pytest.raises(AlignmentError, match="T=2.*T=3"):
        concat_features(Tensor(np.ones((2, 1))), Tensor(np.ones((3, 2))))


def test_concat_gradient_split(rng):
    a = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    upstream = rng.normal(size=(3, 6))
    concat_features(a, b).backward(upstream)
    np.testing.assert_array_equal(a.grad, upstream[:, :2])
    np.testing.assert_array_equal(b.grad, upstream[:, 2:])


# -- pooling -------------------------------------------------------------------


def test_stats_pool_gradient(rng):
    x = Tensor(rng.normal(size=(2, 6, 3)), requires_grad=True)
    weights = rng.normal(size=(2, 6))
    stats_pool(x, [6, 4]).backward(weights)

    def f():
        return float((stats_pool(x, [6, 4]).values * weights).sum())

    assert relative_error(x.grad, central_difference(f, x.values)) < 1e-5
    assert np.all(x.grad[1, 4:] == 0.0)


# -- graph and store -----------------------------------------------------------


def test_no_grad_records_nothing(rng):
    w = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    with no_grad():
        out = linear(Tensor(np.ones((1, 2))), w)
    assert not out.requires_grad


def test_forward_is_deterministic(rng):
    x = Tensor(rng.normal(size=(6, 8)))
    p = _attn_params(rng, 8)
    assert np.array_equal(multi_head_attention(x, p, 4).values, multi_head_attention(x, p, 4).values)


def test_param_store_unique_names():
    store = ParamStore()
    store.add("w", np.zeros(2))
    with pytest.raises(ConfigurationError):
        store.add("w", np.zeros(2))


def test_fully_frozen_store_is_untouched_by_optimizer(rng):
    store = ParamStore()
    store.add("a", rng.normal(size=(3, 3)))
    store.add("b", rng.normal(size=3))
    before = store.state()
    for name in store:
        store[name].grad = rng.normal(size=store[name].shape)
    store.freeze()
    opt = AdamW(TrainConfig(peak_lr=0.1, warmup_steps=1, total_steps=10, weight_decay=0.1))
    for step in range(1, 5):
        opt.step(store, step)
    for name, values in before.items():
        assert store[name].values.tobytes() == values.tobytes()
