import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.signal import correlate2d

from sambaunet import layers as L
from sambaunet import tensor as T
from sambaunet.errors import ConfigurationError, DimensionError
from sambaunet.tensor import Tensor


def conv_oracle(x, w, b, stride, pad):
    """Per-channel scipy cross-correlation, then stride subsampling."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    B, Co = x.shape[0], w.shape[0]
    full = np.stack([
        np.stack([sum(correlate2d(xp[n, c], w[o, c], mode="valid") for c in range(x.shape[1]))
                  for o in range(Co)])
        for n in range(B)
    ])
    return full[:, :, ::stride, ::stride] + b[None, :, None, None]


@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 2, 3]), st.integers(1, 2),
       st.integers(0, 1), st.integers(3, 8), st.integers(0, 2**31 - 1))
def test_conv2d_matches_scipy(ci, co, k, stride, pad, n, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((2, ci, n, n)), rng.standard_normal((co, ci, k, k)), rng.standard_normal(co)
    with T.default_dtype(np.float64):
        got = L.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, conv_oracle(x, w, b, stride, pad), atol=1e-10)


@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([2, 3]), st.integers(1, 2),
       st.integers(0, 1), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_conv_transpose_is_adjoint_of_conv(ci, co, k, stride, pad, n, seed):
    # <conv(y), x> == <y, conv_T(x)> with shared weights
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((co, ci, k, k))
    with T.default_dtype(np.float64):
        x = rng.standard_normal((1, co, n, n))
        out_n = (n - 1) * stride - 2 * pad + k
        if out_n < k:
            return
        y = rng.standard_normal((1, ci, out_n, out_n))
        conv_y = L.conv2d(Tensor(y), Tensor(w), None, stride, pad).data
        if conv_y.shape != x.shape:
            return
        convt_x = L.conv_transpose2d(Tensor(x), Tensor(w), None, stride, pad).data
    assert np.sum(conv_y * x) == pytest.approx(np.sum(y * convt_x), rel=1e-9, abs=1e-9)


def test_conv_transpose_output_extent():
    layer = L.ConvTranspose2d(2, 3, 3, stride=2, padding=1, output_padding=1)
    out = layer(Tensor(np.zeros((1, 2, 4, 4))))
    assert out.shape == (1, 3, 8, 8) == (1, 3, layer.output_extent(4), layer.output_extent(4))


def test_depthwise_matches_per_channel_correlation(rng):
    x, w, b = rng.standard_normal((1, 3, 6, 5)), rng.standard_normal((3, 3, 3)), rng.standard_normal(3)
    with T.default_dtype(np.float64):
        got = L.depthwise_conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    want = np.stack([correlate2d(np.pad(x[0, c], 1), w[c], mode="valid") + b[c] for c in range(3)])
    np.testing.assert_allclose(got[0], want, atol=1e-12)


@given(st.sampled_from(["max", "avg"]), st.integers(1, 3), st.integers(1, 3), st.integers(3, 8),
       st.integers(0, 2**31 - 1))
def test_window_pool_matches_loops(mode, k, s, n, seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, n, n))
    got = L.pool2d(Tensor(x, dtype=np.float64), mode, k, s).data
    reduce = np.max if mode == "max" else np.mean
    m = (n - k) // s + 1
    want = np.array([[[reduce(x[0, c, i * s:i * s + k, j * s:j * s + k]) for j in range(m)]
                      for i in range(m)] for c in range(2)])
    np.testing.assert_allclose(got[0], want, atol=1e-12)


def test_adaptive_pool_global_equals_reduction(rng):
    x = rng.standard_normal((2, 3, 5, 7))
    got = L.adaptive_pool2d(Tensor(x, dtype=np.float64), "avg", 1).data
    np.testing.assert_allclose(got[..., 0, 0], x.mean(axis=(2, 3)), atol=1e-12)
    got = L.adaptive_pool2d(Tensor(x, dtype=np.float64), "max", (1, 1)).data
    np.testing.assert_allclose(got[..., 0, 0], x.max(axis=(2, 3)))


def test_conv_channel_mismatch_raises():
    with pytest.raises(DimensionError):
        L.Conv2d(3, 4, 3)(Tensor(np.zeros((1, 2, 5, 5))))


def test_conv_too_small_input_raises():
    with pytest.raises(ConfigurationError):
        L.Conv2d(1, 1, 5)(Tensor(np.zeros((1, 1, 3, 3))))


def test_depthwise_even_kernel_rejected():
    with pytest.raises(ConfigurationError):
        L.DepthwiseConv2d(4, 2)


def test_parameter_counts_match_closed_forms():
    assert L.Conv2d(3, 5, 3).num_parameters() == L.Conv2d.count(3, 5, 3) == 5 * 3 * 9 + 5
    assert L.ConvTranspose2d(3, 5, 2, bias=False).num_parameters() == 60
    assert L.Linear(4, 6).num_parameters() == L.Linear.count(4, 6) == 30
    assert L.LayerNorm(7).num_parameters() == L.LayerNorm.count(7) == 14


def test_init_is_seeded_and_bounded():
    a, b = L.Conv2d(4, 4, 3), L.Conv2d(4, 4, 3)
    L.init_parameters(a, 5)
    L.init_parameters(b, 5)
    np.testing.assert_array_equal(a.weight.data, b.weight.data)
    assert np.abs(a.weight.data).max() <= np.sqrt(1 / 36)
    assert np.all(a.bias.data == 0)


def test_state_dict_round_trip():
    a, b = L.Linear(3, 2), L.Linear(3, 2)
    L.init_parameters(a, 1)
    L.init_parameters(b, 2)
    b.load_state_dict(a.state_dict())
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_load_state_dict_rejects_mismatch():
    with pytest.raises(ConfigurationError):
        L.Linear(3, 2).load_state_dict({"weight": np.zeros((2, 3))})
    with pytest.raises(DimensionError):
        L.Linear(3, 2).load_state_dict({"weight": np.zeros((3, 3)), "bias": np.zeros(2)})


def test_layer_norm_channel_axis(rng):
    x = Tensor(rng.normal(2.0, 3.0, (2, 5, 3, 3)))
    y = L.LayerNorm(5, axis=1)(x).data
    assert np.abs(y.mean(axis=1)).max() < 1e-5
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-3)


def test_group_norm_standardizes_each_sample(rng):
    y = L.GroupNorm1(3)(Tensor(rng.normal(-4.0, 2.0, (2, 3, 4, 4)))).data
    np.testing.assert_allclose(y.reshape(2, -1).mean(1), 0.0, atol=1e-5)
