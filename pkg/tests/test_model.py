import dataclasses
import itertools

import numpy as np
import pytest

from sambaunet import tensor as T
from sambaunet.errors import ConfigurationError
from sambaunet.gradcheck import gradcheck
from sambaunet.model import (ABLATION_SWITCHES, PRESETS, NetConfig, SambaUNet, forward,
                             parameter_census)
from sambaunet.refiner import RefinerConfig
from sambaunet.tensor import Tensor

MICRO = PRESETS["micro"]


@pytest.fixture(scope="module")
def desk_net():
    return SambaUNet(PRESETS["desk"])


def test_forward_shape(desk_net, rng):
    assert desk_net(Tensor(rng.standard_normal((2, 1, 64, 64)))).shape == (2, 4, 64, 64)


def test_forward_is_deterministic(desk_net, rng):
    x = Tensor(rng.standard_normal((1, 1, 64, 64)))
    with T.no_grad():
        assert desk_net(x).data.tobytes() == desk_net(x).data.tobytes()


def test_same_seed_same_weights():
    a, b = SambaUNet(MICRO), SambaUNet(MICRO)
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes()


def test_geometry_violation_fails_before_compute():
    with pytest.raises(ConfigurationError):
        SambaUNet(dataclasses.replace(MICRO, image_size=10))
    with pytest.raises(ConfigurationError):
        SambaUNet(MICRO)(Tensor(np.zeros((1, 1, 16, 16))))


def test_unknown_switch():
    with pytest.raises(ConfigurationError):
        MICRO.ablated("dropout")


@pytest.mark.parametrize("mask", list(itertools.product([True, False], repeat=len(ABLATION_SWITCHES))))
def test_every_switch_combination_runs(mask):
    cfg = dataclasses.replace(MICRO, **dict(zip(ABLATION_SWITCHES, mask)))
    with T.no_grad():
        out = SambaUNet(cfg)(Tensor(np.ones((1, 1, 8, 8))))
    assert out.shape == (1, 4, 8, 8) and np.all(np.isfinite(out.data))


@pytest.mark.parametrize("switch", list(ABLATION_SWITCHES))
def test_ablation_strictly_reduces_parameters(switch):
    for preset in ("micro", "desk"):
        base = PRESETS[preset]
        assert parameter_census(base.ablated(switch))["total"] < parameter_census(base)["total"]


def test_refiner_ablation_difference_is_closed_form():
    cfg = PRESETS["desk"]
    diff = parameter_census(cfg)["total"] - parameter_census(cfg.ablated("refiner"))["total"]
    per_stage = [RefinerConfig(c, cfg.refiner_ratio).parameter_count() * b
                 for c, b in zip(cfg.channels, cfg.hiera_blocks)]
    assert diff == sum(per_stage)


def test_census_consistency(desk_net):
    census = parameter_census(desk_net)
    parts = sum(v for k, v in census.items() if k not in ("total", "trainable"))
    assert census["total"] == parts == desk_net.num_parameters() == sum(p.size for p in desk_net.parameters())
    assert census["trainable"] == census["total"]


def test_frozen_trunk_excludes_non_adapter_hiera():
    net = SambaUNet(dataclasses.replace(MICRO, freeze_trunk=True))
    for name, p in net.named_parameters():
        trunk = name.startswith("hiera") and ".refiner." not in name and ".mlp_adapter." not in name
        assert p.trainable != trunk, name
    census = parameter_census(net)
    assert census["trainable"] == census["total"] - census["hiera.trunk"]


def test_desk_census_frozen():
    # frozen oracle: per-component counts of the desk preset
    assert dict(parameter_census(PRESETS["desk"])) == {
        "hiera.trunk": 23208, "hiera.refiner": 26432, "hiera.mlp_adapter": 1428, "mamba": 18256,
        "hoacm.oca": 894, "hoacm.bsea": 4203, "hoacm.fuse": 2744, "hoacm.norm": 112,
        "decoder": 20900, "total": 98177, "trainable": 98177,
    }


def test_end_to_end_finite_difference_spot_check():
    rng = np.random.default_rng(0)
    with T.default_dtype(np.float64):
        net = SambaUNet(MICRO)
        x = Tensor(rng.uniform(-1, 1, (1, 1, 8, 8)), requires_grad=True)
        params = [p for n, p in net.named_parameters() if p.size <= 64][:6]
        err = gradcheck(lambda: net(x), [x] + params, step=1e-6, max_elements=12)
    assert err <= 1e-2


def test_logits_finite_for_random_inputs():
    net = SambaUNet(MICRO)
    with T.no_grad():
        for seed in range(100):
            x = np.random.default_rng(seed).uniform(-3, 3, (1, 1, 8, 8))
            assert np.all(np.isfinite(forward(Tensor(x), MICRO, net).data))


def test_config_dict_round_trip():
    cfg = dataclasses.replace(PRESETS["desk"], bsea=False, hoacm_fuse_mode="sum")
    assert NetConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError):
        NetConfig.from_dict({"colour": 1})
