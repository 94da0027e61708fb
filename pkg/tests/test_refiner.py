import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sambaunet import tensor as T
from sambaunet.errors import ConfigurationError, DimensionError
from sambaunet.refiner import (MlpAdapter, MlpAdapterConfig, Refiner, RefinerConfig,
                               channel_descriptor, channel_gate, mlp_adapter_forward,
                               refiner_forward)
from sambaunet.tensor import Tensor


def _zero(module):
    for p in module.parameters():
        p.data = np.zeros_like(p.data)


def _plain_layer_norm(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + eps)


def test_descriptor_of_constant_map():
    d = channel_descriptor(Tensor(np.full((1, 3, 3, 2), 4.0))).data
    np.testing.assert_array_equal(d, [[4.0, 4.0, 4.0, 4.0]])


def test_descriptor_of_spike():
    x = np.zeros((1, 4, 4, 2))
    x[0, 1, 2] = [8.0, -8.0]
    d = channel_descriptor(Tensor(x, dtype=np.float64)).data[0]
    np.testing.assert_allclose(d, [0.5, -0.5, 8.0, 0.0])


@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 5))
def test_descriptor_length_is_two_c(h, w, c):
    assert channel_descriptor(Tensor(np.ones((2, h, w, c)))).shape == (2, 2 * c)


def test_descriptor_rank_error():
    with pytest.raises(DimensionError):
        channel_descriptor(Tensor(np.ones((2, 3, 4))))


def test_zero_weights_gate_halves_input(rng):
    x = Tensor(rng.standard_normal((2, 4, 4, 3)))
    out = channel_gate(channel_descriptor(x), x, Tensor(np.zeros((1, 6))), Tensor(np.zeros((3, 1))))
    np.testing.assert_allclose(out.data, x.data / 2)


def test_scalar_gate_trace():
    x = Tensor(np.ones((1, 1, 1, 1)))
    out = channel_gate(Tensor([[0.0, 0.0]]), x, Tensor([[1.0, 1.0]]), Tensor([[1.0]]))
    assert out.data.item() == pytest.approx(0.5)


def test_gate_channel_mismatch_raises():
    x = Tensor(np.ones((1, 2, 2, 3)))
    with pytest.raises(DimensionError):
        channel_gate(Tensor(np.ones((1, 4))), x, Tensor(np.ones((1, 4))), Tensor(np.ones((3, 1))))


@given(st.integers(0, 2**31 - 1))
def test_gate_strictly_inside_unit_interval(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(np.ones((1, 2, 2, 4)), dtype=np.float64)
    w1, w2 = Tensor(rng.normal(0, 2, (2, 8)), dtype=np.float64), Tensor(rng.normal(0, 2, (4, 2)), dtype=np.float64)
    g = channel_gate(channel_descriptor(x), x, w1, w2).data
    assert np.all((g > 0) & (g < 1))


def test_refiner_shape_contract(rng):
    r = Refiner(RefinerConfig(4))
    assert refiner_forward(r, Tensor(rng.standard_normal((2, 8, 8, 4)))).shape == (2, 8, 8, 4)


def test_refiner_zero_weights_reduce_to_norm_of_one_and_half_x(rng):
    r = Refiner(RefinerConfig(4))
    _zero(r)
    r.norm.weight.data[:] = 1.0
    x = rng.standard_normal((2, 4, 6, 4))
    with T.default_dtype(np.float64):
        out = r(Tensor(x, dtype=np.float64)).data
    np.testing.assert_allclose(out, _plain_layer_norm(1.5 * x), atol=1e-6)


def test_refiner_rejects_odd_extent():
    with pytest.raises(ConfigurationError):
        Refiner(RefinerConfig(4))(Tensor(np.ones((1, 5, 4, 4))))


def test_refiner_config_bottleneck():
    assert RefinerConfig(10, ratio=0.25).bottleneck == 2
    with pytest.raises(ConfigurationError):
        RefinerConfig(3, ratio=0.25)
    with pytest.raises(ConfigurationError):
        RefinerConfig(4, ratio=1.5)


@pytest.mark.parametrize("attn", [True, False])
def test_refiner_count_matches_closed_form(attn):
    cfg = RefinerConfig(8, ratio=0.5, channel_attn=attn)
    assert Refiner(cfg).num_parameters() == cfg.parameter_count()


def test_channel_attention_ablation_reduces_count():
    on = Refiner(RefinerConfig(8)).num_parameters()
    off = Refiner(RefinerConfig(8, channel_attn=False)).num_parameters()
    assert on - off == 3 * 8 * 2


def test_adapter_zero_up_projection_is_identity(rng):
    a = MlpAdapter(MlpAdapterConfig(6))
    a.up.weight.data[:] = 0
    x = Tensor(rng.standard_normal((2, 3, 6)))
    np.testing.assert_array_equal(mlp_adapter_forward(a, x).data, x.data)


def test_adapter_zero_scale_is_identity(rng):
    a = MlpAdapter(MlpAdapterConfig(6, scale=0.0))
    a.init_parameters(3)
    x = Tensor(rng.standard_normal((2, 3, 6)))
    np.testing.assert_array_equal(a(x).data, x.data)


def test_adapter_count_closed_form():
    cfg = MlpAdapterConfig(12, ratio=0.25)
    h = cfg.bottleneck
    assert MlpAdapter(cfg).num_parameters() == 12 * h + h + h * 12 + 12 == cfg.parameter_count()
